//! Telly-K layer-freezing fine-tuning.
//!
//! Groups `0..=K` (the embedding layer and the bottom K encoder layers) are
//! frozen and the rest of the encoder plus a task head is trained on one of
//! three downstream tasks: code search, clone detection or line completion.

mod data;
mod heads;
mod sweep;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricError;
use crate::model::{group_of, param_count, EncoderParams, ModelError};
use crate::numcore::{NumError, Scalar};

pub use data::{
    build_clone_data, build_completion_data, build_search_data, CloneData, ClonePair, CompletionData,
    CompletionExample, SearchData, TaskData,
};
pub use heads::{
    add_task_head, clone_loss, clone_probability, clone_probs_pooled, complete_line, completion_loss, pooled_last,
    search_loss, search_scores, COMPLETION_WEIGHT,
};
pub use sweep::{sweep, sweep_csv_rows, write_sweep_csv, SweepFailure, SweepTable, SWEEP_COLUMNS};
pub use train::{evaluate, finetune, FinetuneConfig, FinetuneOutcome, RunReport, SeedRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Search,
    Clone,
    Completion,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Search, TaskKind::Clone, TaskKind::Completion];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Search => "search",
            TaskKind::Clone => "clone",
            TaskKind::Completion => "completion",
        }
    }

    pub fn metrics(self) -> &'static [&'static str] {
        match self {
            TaskKind::Search => &["mrr", "r@1", "r@5", "r@10"],
            TaskKind::Clone => &["precision", "recall", "f1"],
            TaskKind::Completion => &["edit_sim", "em"],
        }
    }

    /// Metric used for early stopping and change ratios.
    pub fn primary_metric(self) -> &'static str {
        self.metrics()[if self == TaskKind::Clone { 2 } else { 0 }]
    }

    /// Only completion reads the output projection.
    pub fn uses_lm_head(self) -> bool {
        self == TaskKind::Completion
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        TaskKind::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown task {s}"))
    }
}

/// A downstream task: its data plus head hyperparameters.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub data: TaskData,
    /// Temperature of the in-batch contrastive loss (search).
    pub tau: f64,
    /// Longest generated line (completion).
    pub max_gen: usize,
}

impl TaskSpec {
    pub fn new(data: TaskData) -> Self {
        TaskSpec { kind: data.kind(), data, tau: 0.05, max_gen: 24 }
    }
}

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("frozen parameters changed during fine-tuning: {before} -> {after}")]
    FrozenDrift { before: String, after: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which groups a Telly-K run freezes, with closed-form counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    /// `None` is full fine-tuning.
    pub k: Option<usize>,
    pub frozen_groups: Vec<String>,
    pub lm_head_trainable: bool,
    /// Trainable encoder-group elements.
    pub encoder_trainable: u64,
    /// Trainable `head.*` plus output-projection elements.
    pub head_trainable: u64,
    pub trainable: u64,
    pub frozen: u64,
}

fn group_name(g: usize) -> String {
    if g == 0 {
        "embed".into()
    } else {
        format!("layer.{g}")
    }
}

/// Freezes groups `0..=k`, unfreezes the others and every `head.*`
/// parameter; `lm_head.*` follows `lm_head_trainable`. Idempotent.
pub fn apply_freeze<T: Scalar>(
    params: &mut EncoderParams<T>,
    k: Option<usize>,
    lm_head_trainable: bool,
) -> Result<FreezePlan, FinetuneError> {
    let layers = params.config.num_layers;
    if let Some(k) = k {
        if k > layers {
            return Err(ModelError::FreezeRange { k, layers }.into());
        }
    }
    for p in params.set.iter_mut() {
        p.trainable = match group_of(&p.name) {
            Some(g) => k.is_none_or(|k| g > k),
            None if p.name.starts_with("lm_head.") => lm_head_trainable,
            None => true,
        };
    }
    let counts = param_count(&params.config, k, !lm_head_trainable)?;
    let head = params.head_numel();
    let plan = FreezePlan {
        k,
        frozen_groups: k.map(|k| (0..=k).map(group_name).collect()).unwrap_or_default(),
        lm_head_trainable,
        encoder_trainable: counts.encoder_trainable,
        head_trainable: counts.trainable - counts.encoder_trainable + head,
        trainable: counts.trainable + head,
        frozen: counts.frozen,
    };
    debug_assert_eq!(plan.trainable, params.set.trainable_numel());
    Ok(plan)
}

/// Checksum of every parameter a plan freezes.
pub fn frozen_checksum<T: Scalar>(params: &EncoderParams<T>) -> String {
    params.set.checksum_where(|p| !p.trainable)
}
