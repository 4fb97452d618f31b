pub mod codeprops;
pub mod corpus;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod par;
pub mod probes;
pub mod report;
pub mod rsa;
