use super::{AttentionMode, EncoderParams, LayerIds, ModelError};
use crate::numcore::{Graph, RngStream, Scalar, Tensor, Var};

/// Per-layer contextual representations H⁰…Hᴸ of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T> {
    pub h: Vec<Tensor<T>>,
}

impl<T: Scalar> ActivationTrace<T> {
    pub fn num_layers(&self) -> usize {
        self.h.len() - 1
    }

    /// Mean over rows of layer `l`.
    pub fn pooled(&self, l: usize) -> Vec<T> {
        mean_rows(&self.h[l])
    }
}

pub fn mean_rows<T: Scalar>(m: &Tensor<T>) -> Vec<T> {
    let (n, d) = (m.rows(), m.cols());
    let mut out = vec![T::zero(); d];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(m.row(i)) {
            *o += *v;
        }
    }
    let inv = T::one() / T::of(n.max(1) as f64);
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// How an encoder pass is recorded.
#[derive(Debug, Clone)]
pub struct EncodeOpts {
    pub mode: AttentionMode,
    /// Record gradient paths to trainable parameters.
    pub want_grad: bool,
    /// Dropout stream; dropout applies only when this is set and the
    /// configured rate is positive.
    pub dropout: Option<RngStream>,
}

impl EncodeOpts {
    pub fn inference(mode: AttentionMode) -> Self {
        EncodeOpts { mode, want_grad: false, dropout: None }
    }

    pub fn training(mode: AttentionMode) -> Self {
        EncodeOpts { mode, want_grad: true, dropout: None }
    }
}

pub(crate) fn check_ids<T: Scalar>(p: &EncoderParams<T>, ids: &[u32]) -> Result<(), ModelError> {
    let c = &p.config;
    if ids.len() > c.max_positions {
        return Err(ModelError::Overlength { len: ids.len(), max: c.max_positions });
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(ModelError::TokenRange { id: bad, vocab: c.vocab_size });
    }
    Ok(())
}

fn leaf<T: Scalar>(g: &mut Graph<T>, p: &EncoderParams<T>, id: usize, want_grad: bool) -> Result<Var, ModelError> {
    Ok(g.param_with(id, p.param(id), want_grad)?)
}

fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, rng: &mut Option<RngStream>) -> Result<Var, ModelError> {
    let Some(r) = rng.as_mut() else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| if r.bernoulli(rate) { T::zero() } else { T::of(keep) })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?)?;
    Ok(g.mul(x, m)?)
}

/// Records embedding plus all encoder layers; returns the L+1 layer outputs.
pub fn encode<T: Scalar>(g: &mut Graph<T>, p: &EncoderParams<T>, ids: &[u32], opts: &EncodeOpts) -> Result<Vec<Var>, ModelError> {
    check_ids(p, ids)?;
    if ids.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let wg = opts.want_grad;
    let mut drop = opts.dropout.clone();
    let c = &p.config;
    let lay = &p.layout;
    let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let table = leaf(g, p, lay.tokens, wg)?;
    let pos = leaf(g, p, lay.positions, wg)?;
    let tok = g.select_rows(table, &rows)?;
    let pe = g.select_rows(pos, &positions)?;
    let x = g.add(tok, pe)?;
    let (eg, eb) = (leaf(g, p, lay.emb_ln_gain, wg)?, leaf(g, p, lay.emb_ln_bias, wg)?);
    let mut h = g.layer_norm(x, eg, eb, c.ln_eps)?;
    h = dropout(g, h, c.dropout, &mut drop)?;
    let mut out = vec![h];
    for ids in &lay.layers {
        h = layer(g, p, ids, h, opts.mode.is_causal(), wg, &mut drop)?;
        out.push(h);
    }
    Ok(out)
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &EncoderParams<T>, x: Var, w: usize, b: usize, wg: bool) -> Result<Var, ModelError> {
    let wv = leaf(g, p, w, wg)?;
    let bv = leaf(g, p, b, wg)?;
    let y = g.matmul(x, wv)?;
    Ok(g.add_row(y, bv)?)
}

/// One post-norm encoder layer: attention and feed-forward sublayers, each
/// wrapped in a residual connection followed by layer normalization.
fn layer<T: Scalar>(
    g: &mut Graph<T>,
    p: &EncoderParams<T>,
    ids: &LayerIds,
    h: Var,
    causal: bool,
    wg: bool,
    drop: &mut Option<RngStream>,
) -> Result<Var, ModelError> {
    let c = &p.config;
    let q = linear(g, p, h, ids.wq, ids.bq, wg)?;
    let k = linear(g, p, h, ids.wk, ids.bk, wg)?;
    let v = linear(g, p, h, ids.wv, ids.bv, wg)?;
    let a = g.attention(q, k, v, c.num_heads, causal)?;
    let o = linear(g, p, a, ids.wo, ids.bo, wg)?;
    let o = dropout(g, o, c.dropout, drop)?;
    let r = g.add(h, o)?;
    let (ag, ab) = (leaf(g, p, ids.attn_ln_gain, wg)?, leaf(g, p, ids.attn_ln_bias, wg)?);
    let h1 = g.layer_norm(r, ag, ab, c.ln_eps)?;
    let f = linear(g, p, h1, ids.w1, ids.b1, wg)?;
    let f = g.gelu(f)?;
    let f = linear(g, p, f, ids.w2, ids.b2, wg)?;
    let f = dropout(g, f, c.dropout, drop)?;
    let r2 = g.add(h1, f)?;
    let (fg, fb) = (leaf(g, p, ids.ffn_ln_gain, wg)?, leaf(g, p, ids.ffn_ln_bias, wg)?);
    Ok(g.layer_norm(r2, fg, fb, c.ln_eps)?)
}

/// All L+1 layer outputs for one sequence, without gradient bookkeeping.
pub fn forward<T: Scalar>(ids: &[u32], p: &EncoderParams<T>, mode: AttentionMode) -> Result<ActivationTrace<T>, ModelError> {
    let mut g = Graph::new();
    let vars = encode(&mut g, p, ids, &EncodeOpts::inference(mode))?;
    Ok(ActivationTrace {
        h: vars.iter().map(|v| g.value(*v).clone()).collect(),
    })
}

/// Token plus position lookup followed by the embedding layer norm; an
/// empty sequence yields a 0×d matrix.
pub fn embed<T: Scalar>(ids: &[u32], p: &EncoderParams<T>) -> Result<Tensor<T>, ModelError> {
    check_ids(p, ids)?;
    if ids.is_empty() {
        return Ok(Tensor::zeros(&[0, p.config.hidden_dim]));
    }
    Ok(forward_prefix(ids, p, 0, AttentionMode::Bidirectional)?)
}

/// Output of layer `upto` only.
pub fn forward_prefix<T: Scalar>(ids: &[u32], p: &EncoderParams<T>, upto: usize, mode: AttentionMode) -> Result<Tensor<T>, ModelError> {
    let trace = forward(ids, p, mode)?;
    trace.h.into_iter().nth(upto).ok_or(ModelError::Config(format!("layer {upto} out of range")))
}

/// Applies encoder layer `l` (1-based) to a previous layer's output.
pub fn layer_forward<T: Scalar>(p: &EncoderParams<T>, l: usize, h_prev: &Tensor<T>, mode: AttentionMode) -> Result<Tensor<T>, ModelError> {
    let ids = p
        .layout
        .layers
        .get(l.wrapping_sub(1))
        .ok_or_else(|| ModelError::Config(format!("layer {l} out of range")))?;
    let mut g = Graph::new();
    let h = g.constant(h_prev.clone())?;
    let out = layer(&mut g, p, ids, h, mode.is_causal(), false, &mut None)?;
    Ok(g.value(out).clone())
}

/// Vocabulary logits for selected rows of a hidden-state matrix.
pub fn lm_logits<T: Scalar>(g: &mut Graph<T>, p: &EncoderParams<T>, hidden: Var, rows: &[usize], want_grad: bool) -> Result<Var, ModelError> {
    let sel = g.select_rows(hidden, rows)?;
    let w = match p.layout.lm_weight {
        Some(w) => leaf(g, p, w, want_grad)?,
        None => leaf(g, p, p.layout.tokens, want_grad)?,
    };
    let b = leaf(g, p, p.layout.lm_bias, want_grad)?;
    let logits = g.matmul_nt(sel, w)?;
    Ok(g.add_row(logits, b)?)
}
