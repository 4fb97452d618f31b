//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Leaves are either parameters (identified by their index in a
//! [`ParamSet`](super::ParamSet)) or plain inputs. Nodes that cannot reach a
//! gradient-requiring leaf are marked as such and skipped during the
//! backward sweep, so frozen sub-networks cost a forward pass only.
//!
//! Every op checks its output for NaN/Inf and fails with the op name.

use std::collections::HashMap;

use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::{NumError, Parameter, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    Abs(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Mix {
        weights: Var,
        layers: Vec<Var>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    /// Scalar loss whose gradient w.r.t. its single input was computed in the
    /// forward pass (cross-entropy, logistic loss, supervised contrastive).
    Loss {
        input: Var,
        grad: Vec<T>,
    },
    /// Supervised contrastive loss keeps the similarity gradient and rebuilds
    /// the embedding gradient in backward.
    SupCon {
        z: Var,
        grad_s: Vec<T>,
        inv_tau: T,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    params: Vec<(usize, Tensor<T>)>,
    inputs: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Parameter gradients keyed by index in the parameter set used to build the graph.
    pub fn params(&self) -> &[(usize, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.iter().find(|(i, _)| *i == id).map(|(_, t)| t)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.iter().find(|(i, _)| *i == v).map(|(_, t)| t)
    }

    /// Sums another gradient set into this one.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (id, g) in other.params {
            match self.params.iter_mut().find(|(i, _)| *i == id) {
                Some((_, t)) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => self.params.push((id, g)),
            }
        }
        self.params.sort_by_key(|(i, _)| *i);
    }
}

/// Recording tape for one forward computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<usize, Var>,
}

fn shape_err(op: &'static str, l: &[usize], r: &[usize]) -> NumError {
    NumError::Shape {
        op,
        left: l.to_vec(),
        right: r.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Input leaf. When `requires_grad` is set its gradient is reported by
    /// [`Gradients::input`].
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var, NumError> {
        self.push("input", value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, NumError> {
        self.input(value, false)
    }

    /// Parameter leaf; repeated calls with the same id share one node, so
    /// gradients from every use accumulate. Frozen parameters never require grad.
    pub fn param(&mut self, id: usize, p: &Parameter<T>) -> Result<Var, NumError> {
        self.param_with(id, p, p.trainable)
    }

    /// Parameter leaf with an explicit gradient flag (`false` for pure inference).
    pub fn param_with(&mut self, id: usize, p: &Parameter<T>, want_grad: bool) -> Result<Var, NumError> {
        if let Some(v) = self.param_leaves.get(&id) {
            return Ok(*v);
        }
        let v = self.push("param", p.value.clone(), Op::Param(id), want_grad && p.trainable)?;
        self.param_leaves.insert(id, v);
        Ok(v)
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.mat_dims("matmul_nt", a)?;
        let (n, k2) = self.mat_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(&[a, b]);
        self.push("matmul_nt", Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng)
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        self.push(name, t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, NumError> {
        let c = self.value(x).cols();
        if self.value(b).len() != c {
            return Err(shape_err("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (o, &bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(&[x, b]);
        self.push("add_row", t, Op::AddRow(x, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, NumError> {
        let s = T::of(s);
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(&[x]);
        self.push("scale", t, Op::Scale(x, s), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumError> {
        let (c, a) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let t = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let ng = self.ng(&[x]);
        self.push("gelu", t, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x).map(|v| v.tanh());
        let ng = self.ng(&[x]);
        self.push("tanh", t, Op::Tanh(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, NumError> {
        let t = self.value(x).map(|v| v.abs());
        let ng = self.ng(&[x]);
        self.push("abs", t, Op::Abs(x), ng)
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumError::Axis { axis, rank: shape.len() });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = softmax_strided(self.value(x).data(), outer, len, inner);
        let ng = self.ng(&[x]);
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x, outer, len, inner }, ng)
    }

    /// Row-wise layer normalization with affine gain/bias over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumError> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let r = self.value(x).rows();
        let eps = T::of(eps);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let inv_c = T::one() / T::of(c as f64);
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(&[x, gain, bias]);
        self.push("layer_norm", t, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    /// Gathers rows of a matrix (embedding lookup, position selection).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumError> {
        let (r, c) = self.mat_dims("select_rows", x)?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(NumError::Index { op: "select_rows", index: i, bound: r });
            }
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![rows.len(), c], out)?;
        let ng = self.ng(&[x]);
        self.push("select_rows", t, Op::SelectRows { x, rows: rows.to_vec() }, ng)
    }

    /// Multi-head scaled dot-product attention over `n×d` projections.
    /// With `causal`, position `i` attends only to positions `≤ i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var, NumError> {
        let (n, d) = self.mat_dims("attention", q)?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let prow = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let lim = if causal { i + 1 } else { n };
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut mx = T::neg_infinity();
                for j in 0..lim {
                    let s = dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                    prow[j] = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut z = T::zero();
                for p in prow[..lim].iter_mut() {
                    *p = (*p - mx).exp();
                    z += *p;
                }
                let inv = T::one() / z;
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..lim {
                    prow[j] *= inv;
                    let pj = prow[j];
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let ng = self.ng(&[q, k, v]);
        self.push("attention", t, Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Mean over rows: `r×c → 1×c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let (r, c) = self.mat_dims("mean_rows", x)?;
        if r == 0 {
            return Err(NumError::Empty { op: "mean_rows" });
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); c];
        for row in xd.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(r as f64);
        for o in &mut out {
            *o *= inv;
        }
        let ng = self.ng(&[x]);
        self.push("mean_rows", Tensor::new(vec![1, c], out)?, Op::MeanRows(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let r = self.mat_dims("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.mat_dims("concat_cols", p)?;
            if pr != r {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        self.push("concat_cols", Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let c = self.mat_dims("concat_rows", parts[0])?.1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.mat_dims("concat_rows", p)?;
            if pc != c {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            r += pr;
        }
        let ng = self.ng(parts);
        self.push("concat_rows", Tensor::new(vec![r, c], out)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// `Σ_l weights[l] · layers[l]` for equally shaped `layers`.
    pub fn mix(&mut self, weights: Var, layers: &[Var]) -> Result<Var, NumError> {
        if self.value(weights).len() != layers.len() || layers.is_empty() {
            return Err(shape_err("mix", self.shape(weights), &[layers.len()]));
        }
        let shape = self.shape(layers[0]).to_vec();
        let mut out = vec![T::zero(); self.value(layers[0]).len()];
        for (l, &x) in layers.iter().enumerate() {
            if self.shape(x) != shape.as_slice() {
                return Err(shape_err("mix", &shape, self.shape(x)));
            }
            let w = self.value(weights).get(l);
            for (o, &v) in out.iter_mut().zip(self.value(x).data()) {
                *o += w * v;
            }
        }
        let mut deps = layers.to_vec();
        deps.push(weights);
        let ng = self.ng(&deps);
        self.push("mix", Tensor::new(shape, out)?, Op::Mix { weights, layers: layers.to_vec() }, ng)
    }

    /// Scales every row to unit L2 norm; a zero row is a degenerate-vector error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let (r, c) = self.mat_dims("normalize_rows", x)?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        let mut norms = vec![T::zero(); r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let nrm = dot(row, row).sqrt();
            if nrm <= T::zero() {
                return Err(NumError::DegenerateVector(format!("row {i}")));
            }
            norms[i] = nrm;
            for j in 0..c {
                out[i * c + j] = row[j] / nrm;
            }
        }
        let ng = self.ng(&[x]);
        self.push("normalize_rows", Tensor::new(vec![r, c], out)?, Op::NormalizeRows { x, norms }, ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumError> {
        let (r, c) = self.mat_dims("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if r == 0 {
            return Err(NumError::Empty { op: "cross_entropy" });
        }
        let probs = softmax_strided(self.value(logits).data(), r, c, 1);
        let inv_r = 1.0 / r as f64;
        let mut loss = 0.0f64;
        let mut grad = probs;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(NumError::Index { op: "cross_entropy", index: t, bound: c });
            }
            let row = &self.value(logits).data()[i * c..(i + 1) * c];
            loss += log_sum_exp(row) - row[t].as_f64();
            grad[i * c + t] -= T::one();
        }
        for g in &mut grad {
            *g *= T::of(inv_r);
        }
        let ng = self.ng(&[logits]);
        self.push("cross_entropy", Tensor::scalar(T::of(loss * inv_r)), Op::Loss { input: logits, grad }, ng)
    }

    /// Mean logistic loss of logits against {0,1} targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, NumError> {
        let n = self.value(logits).len();
        if targets.len() != n || n == 0 {
            return Err(shape_err("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let inv = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(n);
        for (&z, &t) in self.value(logits).data().iter().zip(targets) {
            let z = z.as_f64();
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            grad.push(T::of((sigmoid(z) - t) * inv));
        }
        let ng = self.ng(&[logits]);
        self.push("bce_with_logits", Tensor::scalar(T::of(loss * inv)), Op::Loss { input: logits, grad }, ng)
    }

    /// Supervised contrastive loss over row embeddings `z` (expected unit-norm)
    /// with class `labels` and temperature `tau`. Anchors without a positive in
    /// the batch are skipped; a batch with no positive pair is an error.
    pub fn sup_con(&mut self, z: Var, labels: &[usize], tau: f64) -> Result<Var, NumError> {
        let (b, k) = self.mat_dims("sup_con", z)?;
        if labels.len() != b {
            return Err(shape_err("sup_con", self.shape(z), &[labels.len()]));
        }
        let zd = self.value(z).data();
        let inv_tau = 1.0 / tau;
        let mut s = vec![0.0f64; b * b];
        for i in 0..b {
            for j in 0..b {
                s[i * b + j] = dot(&zd[i * k..(i + 1) * k], &zd[j * k..(j + 1) * k]).as_f64() * inv_tau;
            }
        }
        let anchors: Vec<usize> = (0..b)
            .filter(|&i| (0..b).any(|j| j != i && labels[j] == labels[i]))
            .collect();
        if anchors.is_empty() {
            return Err(NumError::Invalid("sup_con: batch has no positive pair".into()));
        }
        let inv_a = 1.0 / anchors.len() as f64;
        let mut loss = 0.0;
        let mut grad_s = vec![T::zero(); b * b];
        for &i in &anchors {
            let row = &s[i * b..(i + 1) * b];
            let mx = (0..b).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..b).filter(|&a| a != i).map(|a| (row[a] - mx).exp()).sum();
            let lse = mx + z.ln();
            let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
            let inv_p = 1.0 / pos.len() as f64;
            for &p in &pos {
                loss -= (row[p] - lse) * inv_p * inv_a;
            }
            for a in (0..b).filter(|&a| a != i) {
                let sm = (row[a] - lse).exp();
                let target = if labels[a] == labels[i] { inv_p } else { 0.0 };
                grad_s[i * b + a] = T::of((sm - target) * inv_a);
            }
        }
        let ng = self.ng(&[z]);
        self.push(
            "sup_con",
            Tensor::scalar(T::of(loss)),
            Op::SupCon { z, grad_s, inv_tau: T::of(inv_tau) },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumError> {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Backward sweep from a single-element output with seed 1.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>, NumError> {
        if self.value(out).len() != 1 {
            return Err(shape_err("backward", self.shape(out), &[1]));
        }
        self.backward_with(out, &Tensor::scalar(T::one()))
    }

    /// Backward sweep with an explicit upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: &Tensor<T>) -> Result<Gradients<T>, NumError> {
        if seed.len() != self.value(out).len() {
            return Err(shape_err("backward", self.shape(out), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed.data().to_vec());
        let mut result = Gradients::default();
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            match node.op {
                Op::Param(id) => result.params.push((id, Tensor::new(node.value.shape().to_vec(), g)?)),
                Op::Leaf => result.inputs.push((Var(idx), Tensor::new(node.value.shape().to_vec(), g)?)),
                _ => {}
            }
        }
        let all_finite = result.params.iter().all(|(_, t)| t.is_finite())
            && result.inputs.iter().all(|(_, t)| t.is_finite());
        if !all_finite {
            return Err(NumError::NonFinite { op: "backward" });
        }
        result.params.sort_by_key(|(i, _)| *i);
        Ok(result)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), NumError> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(grads, *a) {
                    gemm_nt(g, self.value(*b).data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_tn(self.value(*a).data(), g, db, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if let Some(da) = self.slot(grads, *a) {
                    gemm_nn(g, self.value(*b).data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_tn(g, self.value(*a).data(), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if let Some(d) = self.slot(grads, v) {
                        for (o, &x) in d.iter_mut().zip(g) {
                            *o += sign * x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if let Some(d) = self.slot(grads, v) {
                        for (o, &x) in d.iter_mut().zip(g) {
                            *o += sign * x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    for ((o, &x), &bv) in d.iter_mut().zip(g).zip(self.value(*b).data()) {
                        *o += x * bv;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((o, &x), &av) in d.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *o += x * av;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let c = self.value(*x).cols();
                if let Some(d) = self.slot(grads, *x) {
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for row in g.chunks(c.max(1)) {
                        for (o, &v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.slot(grads, *x) {
                    for (o, &v) in d.iter_mut().zip(g) {
                        *o += *s * v;
                    }
                }
            }
            Op::Gelu(x) => {
                let (c, a) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                let three = T::of(3.0);
                if let Some(d) = self.slot(grads, *x) {
                    for ((o, &gv), &v) in d.iter_mut().zip(g).zip(self.value(*x).data()) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        *o += gv * (half * (T::one() + t) + half * v * dt);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for ((o, &gv), &y) in d.iter_mut().zip(g).zip(node.value.data()) {
                        *o += gv * (T::one() - y * y);
                    }
                }
            }
            Op::Abs(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for ((o, &gv), &v) in d.iter_mut().zip(g).zip(self.value(*x).data()) {
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *o += gv * s;
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(d) = self.slot(grads, *x) {
                    let y = node.value.data();
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut s = T::zero();
                            for j in 0..*len {
                                s += g[at(j)] * y[at(j)];
                            }
                            for j in 0..*len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = self.value(*x).cols();
                let r = rstd.len();
                let gd = self.value(*gain).data();
                if let Some(d) = self.slot(grads, *gain) {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *bias) {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j];
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *x) {
                    let inv_c = T::one() / T::of(c as f64);
                    let mut dxh = vec![T::zero(); c];
                    for i in 0..r {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            dxh[j] = g[i * c + j] * gd[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xhat[i * c + j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            d[i * c + j] += rstd[i] * (dxh[j] - m1 - xhat[i * c + j] * m2);
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let c = self.value(*x).cols();
                if let Some(d) = self.slot(grads, *x) {
                    for (k, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, probs, grads);
            }
            Op::MeanRows(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let inv = T::one() / T::of(r as f64);
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let (r, w) = (self.shape(p)[0], self.shape(p)[1]);
                    if let Some(d) = self.slot(grads, p) {
                        for i in 0..r {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(d) = self.slot(grads, p) {
                        for (o, &v) in d.iter_mut().zip(&g[off..off + n]) {
                            *o += v;
                        }
                    }
                    off += n;
                }
            }
            Op::Mix { weights, layers } => {
                let w = self.value(*weights).data().to_vec();
                if let Some(d) = self.slot(grads, *weights) {
                    for (l, &x) in layers.iter().enumerate() {
                        d[l] += dot(g, self.value(x).data());
                    }
                }
                for (l, &x) in layers.iter().enumerate() {
                    if let Some(d) = self.slot(grads, x) {
                        for (o, &v) in d.iter_mut().zip(g) {
                            *o += w[l] * v;
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = self.value(*x).cols();
                let y = node.value.data();
                if let Some(d) = self.slot(grads, *x) {
                    for (i, &nrm) in norms.iter().enumerate() {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let yg = dot(yr, gr);
                        for j in 0..c {
                            d[i * c + j] += (gr[j] - yr[j] * yg) / nrm;
                        }
                    }
                }
            }
            Op::Loss { input, grad } => {
                let up = g[0];
                if let Some(d) = self.slot(grads, *input) {
                    for (o, &v) in d.iter_mut().zip(grad) {
                        *o += up * v;
                    }
                }
            }
            Op::SupCon { z, grad_s, inv_tau } => {
                let (b, k) = (self.shape(*z)[0], self.shape(*z)[1]);
                let zd = self.value(*z).data();
                let up = g[0] * *inv_tau;
                if let Some(d) = self.slot(grads, *z) {
                    for i in 0..b {
                        for j in 0..b {
                            let w = (grad_s[i * b + j] + grad_s[j * b + i]) * up;
                            if w == T::zero() {
                                continue;
                            }
                            for t in 0..k {
                                d[i * k + t] += w * zd[j * k + t];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    for o in d.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, d) = (self.shape(q)[0], self.shape(q)[1]);
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let prow = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut s = T::zero();
                for j in 0..n {
                    if prow[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    dp[j] = dot(gi, &vd[j * d + off..j * d + off + dh]);
                    s += prow[j] * dp[j];
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (o, &gv) in dvj.iter_mut().zip(gi) {
                        *o += prow[j] * gv;
                    }
                }
                for j in 0..n {
                    if prow[j] == T::zero() {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - s) * scale;
                    for t in 0..dh {
                        dq[i * d + off + t] += ds * kd[j * d + off + t];
                        dk[j * d + off + t] += ds * qd[i * d + off + t];
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(dst) = self.slot(grads, var) {
                for (o, x) in dst.iter_mut().zip(buf) {
                    *o += x;
                }
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_strided<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                if x[at(j)] > mx {
                    mx = x[at(j)];
                }
            }
            let mut z = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..len {
                out[at(j)] /= z;
            }
        }
    }
    out
}
