use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::numcore::{ParamSet, Parameter, RngStream, Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Parameter indices of one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub attn_ln_gain: usize,
    pub attn_ln_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ffn_ln_gain: usize,
    pub ffn_ln_bias: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tokens: usize,
    pub positions: usize,
    pub emb_ln_gain: usize,
    pub emb_ln_bias: usize,
    pub layers: Vec<LayerIds>,
    pub lm_bias: usize,
    pub lm_weight: Option<usize>,
}

/// Encoder weights plus any task-head parameters added later. Group 0 is the
/// embedding block, group `l` (1…L) is encoder layer `l`; parameters outside
/// every group (`lm_head.*`, `head.*`) belong to heads.
#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    pub config: ModelConfig,
    pub set: ParamSet<T>,
    pub layout: Layout,
}

/// Parameter names and shapes in creation order.
pub fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v, p) = (c.hidden_dim, c.ffn_dim, c.vocab_size, c.max_positions);
    let mut out = vec![
        ("embed.tokens".to_string(), vec![v, d]),
        ("embed.positions".to_string(), vec![p, d]),
        ("embed.ln.gain".to_string(), vec![d]),
        ("embed.ln.bias".to_string(), vec![d]),
    ];
    for l in 1..=c.num_layers {
        let pre = format!("layer.{l}");
        for (n, s) in [
            ("attn.wq", vec![d, d]),
            ("attn.bq", vec![d]),
            ("attn.wk", vec![d, d]),
            ("attn.bk", vec![d]),
            ("attn.wv", vec![d, d]),
            ("attn.bv", vec![d]),
            ("attn.wo", vec![d, d]),
            ("attn.bo", vec![d]),
            ("attn_ln.gain", vec![d]),
            ("attn_ln.bias", vec![d]),
            ("ffn.w1", vec![d, f]),
            ("ffn.b1", vec![f]),
            ("ffn.w2", vec![f, d]),
            ("ffn.b2", vec![d]),
            ("ffn_ln.gain", vec![d]),
            ("ffn_ln.bias", vec![d]),
        ] {
            out.push((format!("{pre}.{n}"), s));
        }
    }
    out.push(("lm_head.bias".to_string(), vec![v]));
    if !c.tie_lm_head {
        out.push(("lm_head.weight".to_string(), vec![v, d]));
    }
    out
}

/// Group index of a parameter name: 0 for `embed.*`, `l` for `layer.l.*`,
/// `None` for head parameters.
pub fn group_of(name: &str) -> Option<usize> {
    if name.starts_with("embed.") {
        return Some(0);
    }
    let rest = name.strip_prefix("layer.")?;
    rest.split('.').next()?.parse().ok()
}

fn init_value(name: &str, shape: &[usize], rng: &RngStream) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let leaf = name.rsplit('.').next().unwrap_or("");
    if leaf == "gain" {
        return vec![1.0; n];
    }
    let is_bias = leaf == "bias" || (leaf.starts_with('b') && leaf.len() == 2);
    if is_bias {
        return vec![0.0; n];
    }
    let mut r = rng.derive(name);
    (0..n).map(|_| r.trunc_normal(INIT_STD)).collect()
}

impl<T: Scalar> EncoderParams<T> {
    /// Truncated-normal (σ = 0.02) weights, zero biases, unit layer-norm
    /// gains; every parameter starts trainable. Each tensor draws from a
    /// stream derived from its name.
    pub fn init(config: &ModelConfig, rng: &RngStream) -> Result<Self, ModelError> {
        config.validate()?;
        let mut set = ParamSet::new();
        for (name, shape) in param_specs(config) {
            let vals = init_value(&name, &shape, rng).into_iter().map(T::of).collect();
            set.add(&name, Tensor::new(shape, vals)?, true)?;
        }
        Self::from_set(config.clone(), set)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_set(config: ModelConfig, set: ParamSet<T>) -> Result<Self, ModelError> {
        config.validate()?;
        for (name, shape) in param_specs(&config) {
            let p = set
                .by_name(&name)
                .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    p.value.shape()
                )));
            }
        }
        let id = |n: &str| set.id(n).expect("checked above");
        let layers = (1..=config.num_layers)
            .map(|l| {
                let n = |s: &str| id(&format!("layer.{l}.{s}"));
                LayerIds {
                    wq: n("attn.wq"),
                    bq: n("attn.bq"),
                    wk: n("attn.wk"),
                    bk: n("attn.bk"),
                    wv: n("attn.wv"),
                    bv: n("attn.bv"),
                    wo: n("attn.wo"),
                    bo: n("attn.bo"),
                    attn_ln_gain: n("attn_ln.gain"),
                    attn_ln_bias: n("attn_ln.bias"),
                    w1: n("ffn.w1"),
                    b1: n("ffn.b1"),
                    w2: n("ffn.w2"),
                    b2: n("ffn.b2"),
                    ffn_ln_gain: n("ffn_ln.gain"),
                    ffn_ln_bias: n("ffn_ln.bias"),
                }
            })
            .collect();
        let layout = Layout {
            tokens: id("embed.tokens"),
            positions: id("embed.positions"),
            emb_ln_gain: id("embed.ln.gain"),
            emb_ln_bias: id("embed.ln.bias"),
            layers,
            lm_bias: id("lm_head.bias"),
            lm_weight: set.id("lm_head.weight"),
        };
        Ok(EncoderParams { config, set, layout })
    }

    pub fn param(&self, id: usize) -> &Parameter<T> {
        self.set.get(id)
    }

    /// Ids of every parameter in group `g`.
    pub fn group_ids(&self, g: usize) -> Vec<usize> {
        (0..self.set.len()).filter(|&i| group_of(&self.set.get(i).name) == Some(g)).collect()
    }

    /// Checksum over groups `0..=k`.
    pub fn groups_checksum(&self, k: usize) -> String {
        self.set.checksum_where(|p| group_of(&p.name).is_some_and(|g| g <= k))
    }

    /// Adds a task-head parameter (name must start with `head.`).
    pub fn add_head_param(&mut self, name: &str, value: Tensor<T>) -> Result<usize, ModelError> {
        if !name.starts_with("head.") {
            return Err(ModelError::Config(format!("head parameter {name} must be named head.*")));
        }
        Ok(self.set.add(name, value, true)?)
    }

    /// Number of elements in parameters named `head.*`.
    pub fn head_numel(&self) -> u64 {
        self.set.iter().filter(|p| p.name.starts_with("head.")).map(|p| p.value.len() as u64).sum()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        let mut set = ParamSet::new();
        for p in self.set.iter() {
            set.add(&p.name, p.value.cast(), p.trainable).expect("names unique in source");
        }
        EncoderParams {
            config: self.config.clone(),
            set,
            layout: self.layout.clone(),
        }
    }
}

/// Closed-form parameter accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Element count of groups 0…L.
    pub per_group: Vec<u64>,
    /// Output-projection parameters (bias, plus the weight when untied).
    pub lm_head: u64,
    pub total: u64,
    pub trainable: u64,
    pub frozen: u64,
    /// Trainable elements in groups K+1…L only.
    pub encoder_trainable: u64,
}

/// `4(d²+d) + (d·f+f) + (f·d+d) + 4d`.
pub fn per_layer_count(c: &ModelConfig) -> u64 {
    let (d, f) = (c.hidden_dim as u64, c.ffn_dim as u64);
    4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
}

pub fn embedding_count(c: &ModelConfig) -> u64 {
    let d = c.hidden_dim as u64;
    c.vocab_size as u64 * d + c.max_positions as u64 * d + 2 * d
}

pub fn lm_head_count(c: &ModelConfig) -> u64 {
    let v = c.vocab_size as u64;
    if c.tie_lm_head {
        v
    } else {
        v + v * c.hidden_dim as u64
    }
}

/// Counts for Telly-style freezing of groups `0..=k` (`None` freezes
/// nothing). `lm_head_frozen` also freezes the output projection.
pub fn param_count(c: &ModelConfig, k: Option<usize>, lm_head_frozen: bool) -> Result<ParamCount, ModelError> {
    if let Some(k) = k {
        if k > c.num_layers {
            return Err(ModelError::FreezeRange { k, layers: c.num_layers });
        }
    }
    let mut per_group = vec![embedding_count(c)];
    per_group.extend(std::iter::repeat_n(per_layer_count(c), c.num_layers));
    let lm_head = lm_head_count(c);
    let frozen_groups: u64 = match k {
        Some(k) => per_group[..=k].iter().sum(),
        None => 0,
    };
    let groups_total: u64 = per_group.iter().sum();
    let encoder_trainable = groups_total - frozen_groups;
    let trainable = encoder_trainable + if lm_head_frozen { 0 } else { lm_head };
    let total = groups_total + lm_head;
    Ok(ParamCount {
        per_group,
        lm_head,
        total,
        trainable,
        frozen: total - trainable,
        encoder_trainable,
    })
}
