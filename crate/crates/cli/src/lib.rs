//! Command surface of the `codelayers` binary: configuration, the shared
//! experiment pipeline, and one function per subcommand.

pub mod commands;
pub mod config;
pub mod output;
pub mod pipeline;

/// Runs `$body` with `$t` bound to the scalar type of a precision.
#[macro_export]
macro_rules! with_precision {
    ($p:expr, $t:ident => $body:expr) => {
        match $p {
            codelayers::numcore::Precision::F32 => {
                type $t = f32;
                $body
            }
            codelayers::numcore::Precision::F64 => {
                type $t = f64;
                $body
            }
        }
    };
}
