use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

impl AttentionMode {
    pub fn is_causal(self) -> bool {
        self == AttentionMode::Causal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub attention_mode: AttentionMode,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Output projection shares the token embedding table when set.
    pub tie_lm_head: bool,
}

impl ModelConfig {
    /// Trainable desk-scale model: L=4, d=64, f=256, 4 heads, 128 positions.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 64,
            ffn_dim: 256,
            num_heads: 4,
            vocab_size,
            max_positions: 128,
            attention_mode: AttentionMode::Bidirectional,
            dropout: 0.0,
            ln_eps: 1e-5,
            tie_lm_head: true,
        }
    }

    /// 12×768×3072 encoder with a 51,416-token vocabulary and 1,026
    /// positions. Used for parameter accounting only.
    pub fn paper_scale() -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_dim: 768,
            ffn_dim: 3072,
            num_heads: 12,
            vocab_size: 51_416,
            max_positions: 1_026,
            attention_mode: AttentionMode::Bidirectional,
            dropout: 0.0,
            ln_eps: 1e-5,
            tie_lm_head: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.ln_eps <= 0.0 {
            return Err(ModelError::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Shape-relevant fields agree (mode, dropout and eps may differ).
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        self.num_layers == other.num_layers
            && self.hidden_dim == other.hidden_dim
            && self.ffn_dim == other.ffn_dim
            && self.num_heads == other.num_heads
            && self.vocab_size == other.vocab_size
            && self.max_positions == other.max_positions
            && self.tie_lm_head == other.tie_lm_head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::desk(100).validate().is_ok());
        assert!(ModelConfig::paper_scale().validate().is_ok());
        let mut c = ModelConfig::desk(100);
        c.num_heads = 5;
        assert!(c.validate().is_err());
        c = ModelConfig::desk(0);
        assert!(c.validate().is_err());
    }
}
