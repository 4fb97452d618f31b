//! Probing tasks over frozen layer-wise representations.
//!
//! Four datasets are built from the toy corpus: lexical (token class per
//! position), syntactic (does this AST-Only belong to this code?), semantic
//! (cluster semantically equivalent variants) and structural (cyclomatic
//! complexity bucket). A probe is a softmax layer mixer over H⁰…Hᴸ followed by
//! a linear head; the encoder itself never trains.

mod datasets;
mod features;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codeprops::CodeError;
use crate::corpus::Split;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::numcore::NumError;

pub use datasets::{
    build_lexical_dataset, build_semantic_dataset, build_structural_dataset, build_syntactic_dataset, complexity_class,
    semantic_variant, SemanticConfig, COMPLEXITY_CLASSES,
};
pub use features::{extract_features, pooled_layers, represent, Features};
pub use train::{
    eval_probe, layer_contributions, train_probe, LayerContribution, LayerMixer, ProbeConfig, ProbeReport, SeedResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Lexical,
    Syntactic,
    Semantic,
    Structural,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 4] = [ProbeTask::Lexical, ProbeTask::Syntactic, ProbeTask::Semantic, ProbeTask::Structural];

    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::Lexical => "lexical",
            ProbeTask::Syntactic => "syntactic",
            ProbeTask::Semantic => "semantic",
            ProbeTask::Structural => "structural",
        }
    }

    /// Name of the reported metric.
    pub fn metric_name(self) -> &'static str {
        match self {
            ProbeTask::Semantic => "map",
            _ => "accuracy",
        }
    }
}

/// Where a set of representations came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepSource {
    Random,
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeInput {
    /// One representation row of one sequence.
    Token { seq: usize, row: usize },
    /// A whole sequence, mean-pooled.
    Sequence(usize),
    /// Two pooled sequences.
    Pair(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub input: ProbeInput,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub task: ProbeTask,
    /// Encoded inputs, already wrapped in `[CLS] … [SEP]` and truncated.
    pub sequences: Vec<Vec<u32>>,
    pub examples: Vec<ProbeExample>,
    pub num_classes: usize,
}

impl ProbeDataset {
    pub fn split(&self, s: Split) -> impl Iterator<Item = (usize, &ProbeExample)> {
        self.examples.iter().enumerate().filter(move |(_, e)| e.split == s)
    }

    pub fn count(&self, s: Split) -> usize {
        self.split(s).count()
    }
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error("dataset: {0}")]
    Dataset(String),
    /// Model parameters changed while training a probe.
    #[error("frozen-feature contract violated: model checksum {before} became {after}")]
    FrozenContract { before: String, after: String },
}
