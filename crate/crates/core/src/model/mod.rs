//! Transformer encoder: token and position embeddings followed by L post-norm
//! encoder layers, a masked-LM head and a binary checkpoint format.
//!
//! Parameters are grouped for freezing. Group 0 holds the embedding tables and
//! the embedding layer norm, group `l` holds encoder layer `l`, and head
//! parameters (`lm_head.*`, `head.*`) sit outside every group.

mod checkpoint;
mod config;
mod encoder;
mod forward;
mod mlm;

use thiserror::Error;

use crate::numcore::NumError;

pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, CheckpointHeader, TensorEntry, CKPT_VERSION};
pub use config::{AttentionMode, ModelConfig};
pub use encoder::{
    embedding_count, group_of, lm_head_count, param_count, param_specs, per_layer_count, EncoderParams, LayerIds,
    Layout, ParamCount, INIT_STD,
};
pub use forward::{
    embed, encode, forward, forward_prefix, layer_forward, lm_logits, mean_rows, ActivationTrace, EncodeOpts,
};
pub use mlm::{mask_sequence, masked_lm_loss, mlm_gradients, pretrain, Masked, PretrainConfig, PretrainLog};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("freeze depth {k} outside 0..={layers}")]
    FreezeRange { k: usize, layers: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenRange { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_positions {max}")]
    Overlength { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// No position in the batch was masked; the caller should skip it.
    #[error("batch has no masked positions")]
    NothingToMask,
}
