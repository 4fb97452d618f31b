use serde::{Deserialize, Serialize};

use super::{encode, lm_logits, AttentionMode, EncodeOpts, EncoderParams, ModelError};
use crate::numcore::{adam_step, AdamConfig, AdamState, Gradients, Graph, RngStream, Scalar};
use crate::par::{self, Exec};

/// Ids never selected for masking: PAD, CLS, SEP and MASK.
const UNMASKABLE: [u32; 4] = [0, 2, 3, 4];
const MASK_ID: u32 = 4;

/// One sequence after masking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masked {
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Replaces each maskable position with `[MASK]` with probability `p`.
pub fn mask_sequence(ids: &[u32], p: f64, rng: &mut RngStream) -> Masked {
    let mut out = ids.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, &t) in ids.iter().enumerate() {
        if UNMASKABLE.contains(&t) {
            continue;
        }
        if rng.bernoulli(p) {
            out[i] = MASK_ID;
            positions.push(i);
            targets.push(t as usize);
        }
    }
    Masked { ids: out, positions, targets }
}

fn mask_batch(batch: &[Vec<u32>], p: f64, rng: &RngStream) -> Result<(Vec<Masked>, usize), ModelError> {
    let masked: Vec<Masked> = batch
        .iter()
        .enumerate()
        .map(|(i, ids)| mask_sequence(ids, p, &mut rng.derive(&format!("mask/{i}"))))
        .collect();
    let total: usize = masked.iter().map(|m| m.positions.len()).sum();
    if total == 0 {
        return Err(ModelError::NothingToMask);
    }
    Ok((masked, total))
}

/// Mean cross-entropy over every masked position in the batch, with its
/// gradient. Masks come from `rng.derive("mask/i")` for example `i`, so the
/// result does not depend on `exec`.
pub fn mlm_gradients<T: Scalar>(
    batch: &[Vec<u32>],
    params: &EncoderParams<T>,
    mask_prob: f64,
    rng: &RngStream,
    exec: Exec,
) -> Result<(f64, Gradients<T>), ModelError> {
    let (masked, total) = mask_batch(batch, mask_prob, rng)?;
    let mode = params.config.attention_mode;
    let parts = par::try_map(exec, &masked, |m| example_grad(m, params, mode, total))?;
    let mut loss = 0.0;
    let mut grads = Gradients::default();
    for (l, g) in parts.into_iter().flatten() {
        loss += l;
        grads.merge(g);
    }
    Ok((loss, grads))
}

fn example_grad<T: Scalar>(
    m: &Masked,
    params: &EncoderParams<T>,
    mode: AttentionMode,
    total: usize,
) -> Result<Option<(f64, Gradients<T>)>, ModelError> {
    if m.positions.is_empty() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let hs = encode(&mut g, params, &m.ids, &EncodeOpts::training(mode))?;
    let top = *hs.last().expect("at least the embedding layer");
    let logits = lm_logits(&mut g, params, top, &m.positions, true)?;
    let ce = g.cross_entropy(logits, &m.targets)?;
    let w = m.positions.len() as f64 / total as f64;
    let loss = g.scale(ce, w)?;
    let value = g.value(loss).item().as_f64();
    Ok(Some((value, g.backward(loss)?)))
}

/// Loss value only.
pub fn masked_lm_loss<T: Scalar>(
    batch: &[Vec<u32>],
    params: &EncoderParams<T>,
    mask_prob: f64,
    rng: &RngStream,
) -> Result<f64, ModelError> {
    let (masked, total) = mask_batch(batch, mask_prob, rng)?;
    let mode = params.config.attention_mode;
    let mut loss = 0.0;
    for m in masked.iter().filter(|m| !m.positions.is_empty()) {
        let mut g = Graph::new();
        let hs = encode(&mut g, params, &m.ids, &EncodeOpts::inference(mode))?;
        let logits = lm_logits(&mut g, params, *hs.last().expect("nonempty"), &m.positions, false)?;
        let ce = g.cross_entropy(logits, &m.targets)?;
        loss += g.value(ce).item().as_f64() * m.positions.len() as f64 / total as f64;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch_size: 16,
            mask_prob: 0.15,
            lr: 1e-3,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    pub skipped: usize,
}

/// Masked-LM training with Adam over shuffled minibatches of `seqs`.
pub fn pretrain<T: Scalar>(
    params: &mut EncoderParams<T>,
    seqs: &[Vec<u32>],
    cfg: &PretrainConfig,
    exec: Exec,
) -> Result<PretrainLog, ModelError> {
    if seqs.is_empty() || cfg.batch_size == 0 {
        return Err(ModelError::EmptyInput);
    }
    let root = RngStream::new(cfg.seed).derive("pretrain");
    let mut order_rng = root.derive("order");
    let adam = AdamConfig { clip_norm: cfg.clip_norm, ..AdamConfig::with_lr(cfg.lr) };
    let mut state = AdamState::init(&params.set);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    let mut log = PretrainLog::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(seqs.len()) {
            if cursor == order.len() {
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(seqs[order[cursor]].clone());
            cursor += 1;
        }
        let step_rng = root.derive(&format!("step/{step}"));
        match mlm_gradients(&batch, params, cfg.mask_prob, &step_rng, exec) {
            Ok((loss, grads)) => {
                params.set.zero_grad();
                params.set.accumulate(&grads)?;
                adam_step(&mut params.set, &mut state, &adam)?;
                log.losses.push(loss);
            }
            Err(ModelError::NothingToMask) => log.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    params.set.zero_grad();
    Ok(log)
}
