use std::cmp::Ordering;

use super::{CompletionExample, FinetuneError, TaskKind};
use crate::corpus::Vocabulary;
use crate::model::{encode, forward, mean_rows, AttentionMode, EncodeOpts, EncoderParams, ModelError};
use crate::numcore::{Gradients, Graph, RngStream, Scalar, Tensor, Var};
use crate::par::{self, Exec};

/// Untied output projection used by completion; starts as a copy of the
/// token table so the tied pretraining head is recovered exactly.
pub const COMPLETION_WEIGHT: &str = "head.lm.weight";

const CLONE_W1: &str = "head.clone.w1";
const CLONE_B1: &str = "head.clone.b1";
const CLONE_W2: &str = "head.clone.w2";
const CLONE_B2: &str = "head.clone.b2";

/// Registers the task head's parameters. Search has none: it scores with the
/// encoder alone.
pub fn add_task_head<T: Scalar>(params: &mut EncoderParams<T>, kind: TaskKind, rng: &RngStream) -> Result<(), FinetuneError> {
    let d = params.config.hidden_dim;
    let mut normal = |name: &str, rows: usize, cols: usize| -> Result<(), FinetuneError> {
        let mut r = rng.derive(name);
        let v = (0..rows * cols).map(|_| T::of(r.trunc_normal(0.02))).collect();
        params.add_head_param(name, Tensor::new(vec![rows, cols], v)?)?;
        Ok(())
    };
    match kind {
        TaskKind::Search => {}
        TaskKind::Clone => {
            normal(CLONE_W1, 4 * d, d)?;
            normal(CLONE_W2, d, 1)?;
            params.add_head_param(CLONE_B1, Tensor::zeros(&[d]))?;
            params.add_head_param(CLONE_B2, Tensor::zeros(&[1]))?;
        }
        TaskKind::Completion => {
            let table = params.param(params.layout.tokens).value.clone();
            params.add_head_param(COMPLETION_WEIGHT, table)?;
        }
    }
    Ok(())
}

fn head_id<T: Scalar>(params: &EncoderParams<T>, name: &str) -> Result<usize, FinetuneError> {
    params.set.id(name).ok_or_else(|| FinetuneError::Dataset(format!("missing head parameter {name}")))
}

fn leaf<T: Scalar>(g: &mut Graph<T>, params: &EncoderParams<T>, name: &str) -> Result<Var, FinetuneError> {
    let id = head_id(params, name)?;
    Ok(g.param(id, params.param(id))?)
}

/// Mean of the last layer's rows, special tokens included.
pub fn pooled_last<T: Scalar>(params: &EncoderParams<T>, ids: &[u32]) -> Result<Vec<f64>, FinetuneError> {
    let trace = forward(ids, params, AttentionMode::Bidirectional)?;
    Ok(mean_rows(trace.h.last().expect("trace has layers")).iter().map(|v| v.as_f64()).collect())
}

/// Recorded pass of one sequence ending in its pooled last layer.
struct Pooled<T> {
    g: Graph<T>,
    out: Var,
}

impl<T: Scalar> Pooled<T> {
    fn new(params: &EncoderParams<T>, ids: &[u32]) -> Result<Self, ModelError> {
        let mut g = Graph::new();
        let hs = encode(&mut g, params, ids, &EncodeOpts::training(AttentionMode::Bidirectional))?;
        let out = g.mean_rows(*hs.last().expect("trace has layers"))?;
        Ok(Pooled { g, out })
    }

    fn row(&self) -> &[T] {
        self.g.value(self.out).data()
    }
}

fn stack<T: Scalar>(rows: &[&[T]]) -> Result<Tensor<T>, FinetuneError> {
    let d = rows.first().map_or(0, |r| r.len());
    Ok(Tensor::new(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect())?)
}

/// Sends `seeds[i]` back through `pooled[i]` and merges everything with the
/// loss graph's own parameter gradients.
fn backprop<T: Scalar>(
    pooled: &[Pooled<T>],
    seeds: Vec<Tensor<T>>,
    mut head: Gradients<T>,
    exec: Exec,
) -> Result<Gradients<T>, FinetuneError> {
    let jobs: Vec<(usize, Tensor<T>)> = seeds.into_iter().enumerate().collect();
    let parts = par::try_map(exec, &jobs, |(i, seed)| -> Result<Option<Gradients<T>>, FinetuneError> {
        let p = &pooled[*i];
        if !p.g.needs_grad(p.out) {
            return Ok(None);
        }
        Ok(Some(p.g.backward_with(p.out, seed)?))
    })?;
    for g in parts.into_iter().flatten() {
        head.merge(g);
    }
    Ok(head)
}

fn input_rows<T: Scalar>(grads: &Gradients<T>, v: Var, n: usize, d: usize) -> Vec<Tensor<T>> {
    let zero = Tensor::zeros(&[1, d]);
    match grads.input(v) {
        Some(t) => (0..n).map(|i| Tensor::new(vec![1, d], t.row(i).to_vec()).expect("row shape")).collect(),
        None => vec![zero; n],
    }
}

/// In-batch contrastive loss: query `i`'s positive is code `i`, the other
/// codes of the batch are its negatives. Scores are cosines over `tau`.
pub fn search_loss<T: Scalar>(
    params: &EncoderParams<T>,
    queries: &[&[u32]],
    codes: &[&[u32]],
    tau: f64,
    exec: Exec,
) -> Result<(f64, Gradients<T>), FinetuneError> {
    let b = queries.len();
    if b < 2 || codes.len() != b {
        return Err(FinetuneError::Dataset("search batch needs at least two aligned pairs".into()));
    }
    let seqs: Vec<&[u32]> = queries.iter().chain(codes).copied().collect();
    let pooled = par::try_map(exec, &seqs, |s| Pooled::new(params, s))?;
    let d = params.config.hidden_dim;
    let mut g = Graph::new();
    let rows: Vec<&[T]> = pooled.iter().map(|p| p.row()).collect();
    let q = g.input(stack(&rows[..b])?, true)?;
    let c = g.input(stack(&rows[b..])?, true)?;
    let qn = g.normalize_rows(q)?;
    let cn = g.normalize_rows(c)?;
    let s = g.matmul_nt(qn, cn)?;
    let s = g.scale(s, 1.0 / tau)?;
    let targets: Vec<usize> = (0..b).collect();
    let loss = g.cross_entropy(s, &targets)?;
    let value = g.value(loss).item().as_f64();
    let lg = g.backward(loss)?;
    let mut seeds = input_rows(&lg, q, b, d);
    seeds.extend(input_rows(&lg, c, b, d));
    Ok((value, backprop(&pooled, seeds, Gradients::default(), exec)?))
}

/// `scores[i][j]` = cosine between query `i` and code `j`.
pub fn search_scores<T: Scalar>(
    params: &EncoderParams<T>,
    queries: &[Vec<u32>],
    codes: &[Vec<u32>],
    exec: Exec,
) -> Result<Vec<Vec<f64>>, FinetuneError> {
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let q = par::try_map(exec, queries, |s| pooled_last(params, s).map(unit))?;
    let c = par::try_map(exec, codes, |s| pooled_last(params, s).map(unit))?;
    Ok(q.iter().map(|a| c.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect()).collect())
}

fn lex_cmp<T: Scalar>(a: &[T], b: &[T]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Clone logits for rows of `u` and `v`: a two-layer perceptron over
/// `[u; v; |u−v|; u⊙v]`.
fn clone_logits<T: Scalar>(g: &mut Graph<T>, params: &EncoderParams<T>, u: Var, v: Var) -> Result<Var, FinetuneError> {
    let diff = g.sub(u, v)?;
    let ad = g.abs(diff)?;
    let prod = g.mul(u, v)?;
    let x = g.concat_cols(&[u, v, ad, prod])?;
    let (w1, b1) = (leaf(g, params, CLONE_W1)?, leaf(g, params, CLONE_B1)?);
    let (w2, b2) = (leaf(g, params, CLONE_W2)?, leaf(g, params, CLONE_B2)?);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, w2)?;
    Ok(g.add_row(o, b2)?)
}

/// Orders a pair canonically (lexicographic on pooled values) so the head
/// is symmetric in its inputs.
fn canonical<'a, T: Scalar>(a: &'a [T], b: &'a [T]) -> (bool, &'a [T], &'a [T]) {
    if lex_cmp(b, a) == Ordering::Less {
        (true, b, a)
    } else {
        (false, a, b)
    }
}

/// Mean binary cross-entropy of the clone head over a batch of pairs.
pub fn clone_loss<T: Scalar>(
    params: &EncoderParams<T>,
    pairs: &[(&[u32], &[u32], bool)],
    exec: Exec,
) -> Result<(f64, Gradients<T>), FinetuneError> {
    let b = pairs.len();
    if b == 0 {
        return Err(FinetuneError::Dataset("empty clone batch".into()));
    }
    let seqs: Vec<&[u32]> = pairs.iter().flat_map(|(x, y, _)| [*x, *y]).collect();
    let pooled = par::try_map(exec, &seqs, |s| Pooled::new(params, s))?;
    let d = params.config.hidden_dim;
    let mut swapped = Vec::with_capacity(b);
    let (mut first, mut second) = (Vec::with_capacity(b), Vec::with_capacity(b));
    for i in 0..b {
        let (s, x, y) = canonical(pooled[2 * i].row(), pooled[2 * i + 1].row());
        swapped.push(s);
        first.push(x);
        second.push(y);
    }
    let mut g = Graph::new();
    let u = g.input(stack(&first)?, true)?;
    let v = g.input(stack(&second)?, true)?;
    let logits = clone_logits(&mut g, params, u, v)?;
    let targets: Vec<f64> = pairs.iter().map(|p| if p.2 { 1.0 } else { 0.0 }).collect();
    let loss = g.bce_with_logits(logits, &targets)?;
    let value = g.value(loss).item().as_f64();
    let mut lg = g.backward(loss)?;
    let gu = input_rows(&lg, u, b, d);
    let gv = input_rows(&lg, v, b, d);
    let mut seeds = Vec::with_capacity(2 * b);
    for i in 0..b {
        let (a, c) = if swapped[i] { (gv[i].clone(), gu[i].clone()) } else { (gu[i].clone(), gv[i].clone()) };
        seeds.push(a);
        seeds.push(c);
    }
    let head = std::mem::take(&mut lg);
    Ok((value, backprop(&pooled, seeds, head, exec)?))
}

/// Clone probabilities from already pooled pairs.
pub fn clone_probs_pooled<T: Scalar>(params: &EncoderParams<T>, pairs: &[(&[f64], &[f64])]) -> Result<Vec<f64>, FinetuneError> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let cast = |r: &[f64]| r.iter().map(|v| T::of(*v)).collect::<Vec<T>>();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (a, b) in pairs {
        let (_, x, y) = canonical(a, b);
        first.push(cast(x));
        second.push(cast(y));
    }
    let fr: Vec<&[T]> = first.iter().map(|r| r.as_slice()).collect();
    let sr: Vec<&[T]> = second.iter().map(|r| r.as_slice()).collect();
    let mut g = Graph::new();
    let u = g.constant(stack(&fr)?)?;
    let v = g.constant(stack(&sr)?)?;
    let logits = clone_logits(&mut g, params, u, v)?;
    Ok(g.value(logits).data().iter().map(|z| 1.0 / (1.0 + (-z.as_f64()).exp())).collect())
}

/// Probability that two snippets are clones.
pub fn clone_probability<T: Scalar>(params: &EncoderParams<T>, a: &[u32], b: &[u32]) -> Result<f64, FinetuneError> {
    let (pa, pb) = (pooled_last(params, a)?, pooled_last(params, b)?);
    Ok(clone_probs_pooled(params, &[(&pa, &pb)])?[0])
}

fn completion_logits<T: Scalar>(
    g: &mut Graph<T>,
    params: &EncoderParams<T>,
    top: Var,
    rows: &[usize],
) -> Result<Var, FinetuneError> {
    let sel = g.select_rows(top, rows)?;
    let w = leaf(g, params, COMPLETION_WEIGHT)?;
    let b = g.param(params.layout.lm_bias, params.param(params.layout.lm_bias))?;
    let z = g.matmul_nt(sel, w)?;
    Ok(g.add_row(z, b)?)
}

/// Next-token cross-entropy over the target line (and its NEWLINE), causal
/// attention, averaged over all supervised tokens in the batch.
pub fn completion_loss<T: Scalar>(
    params: &EncoderParams<T>,
    batch: &[&CompletionExample],
    vocab: &Vocabulary,
    exec: Exec,
) -> Result<(f64, Gradients<T>), FinetuneError> {
    let max = params.config.max_positions;
    let prepared: Vec<_> = batch.iter().map(|e| e.training_ids(vocab.cls(), vocab.newline(), max)).collect();
    let total: usize = prepared.iter().map(|p| p.1.len()).sum();
    if total == 0 {
        return Err(FinetuneError::Dataset("empty completion batch".into()));
    }
    let parts = par::try_map(exec, &prepared, |(ids, rows, targets)| -> Result<(f64, Gradients<T>), FinetuneError> {
        let mut g = Graph::new();
        let hs = encode(&mut g, params, ids, &EncodeOpts::training(AttentionMode::Causal))?;
        let logits = completion_logits(&mut g, params, *hs.last().expect("trace has layers"), rows)?;
        let ce = g.cross_entropy(logits, targets)?;
        let loss = g.scale(ce, rows.len() as f64 / total as f64)?;
        Ok((g.value(loss).item().as_f64(), g.backward(loss)?))
    })?;
    let mut loss = 0.0;
    let mut grads = Gradients::default();
    for (l, g) in parts {
        loss += l;
        grads.merge(g);
    }
    Ok((loss, grads))
}

/// Greedy decoding of the next line: stops at NEWLINE (not returned) or after
/// `max_gen` tokens. Contexts too long for the position table lose their
/// oldest tokens; the flag reports whether that happened.
pub fn complete_line<T: Scalar>(
    params: &EncoderParams<T>,
    context: &[u32],
    vocab: &Vocabulary,
    max_gen: usize,
) -> Result<(Vec<u32>, bool), FinetuneError> {
    let max = params.config.max_positions;
    let mut seq: Vec<u32> = context.to_vec();
    let mut out = Vec::new();
    let mut truncated = false;
    while out.len() < max_gen {
        let room = max - 1;
        if seq.len() > room {
            seq.drain(..seq.len() - room);
            truncated = true;
        }
        let mut ids = Vec::with_capacity(seq.len() + 1);
        ids.push(vocab.cls());
        ids.extend_from_slice(&seq);
        let mut g = Graph::new();
        let hs = encode(&mut g, params, &ids, &EncodeOpts::inference(AttentionMode::Causal))?;
        let logits = completion_logits(&mut g, params, *hs.last().expect("trace has layers"), &[ids.len() - 1])?;
        let z = g.value(logits).data();
        let mut best = 0;
        for (i, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = i;
            }
        }
        let next = best as u32;
        if next == vocab.newline() {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    if truncated {
        log::warn!("completion context exceeded {max} positions and was truncated from the left");
    }
    Ok((out, truncated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_toy_corpus;
    use crate::finetune::{apply_freeze, build_completion_data};
    use crate::model::ModelConfig;
    use crate::numcore::{adam_step, AdamConfig, AdamState};

    fn setup(layers: usize) -> (Vocabulary, Vec<crate::corpus::CorpusRecord>, EncoderParams<f64>) {
        let corpus = generate_toy_corpus(3, 40);
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let mut c = ModelConfig::desk(vocab.len());
        c.num_layers = layers;
        c.hidden_dim = 16;
        c.ffn_dim = 32;
        c.num_heads = 2;
        let p = EncoderParams::init(&c, &RngStream::new(1)).unwrap();
        (vocab, corpus, p)
    }

    #[test]
    fn search_self_score_and_initial_loss() {
        let (vocab, corpus, p) = setup(2);
        let code: Vec<Vec<u32>> = corpus.iter().map(|r| vocab.wrap_truncated(&vocab.encode(&r.code), 128)).collect();
        let s = search_scores(&p, &code[..3], &code[..3], Exec::default()).unwrap();
        for (i, row) in s.iter().enumerate() {
            assert!((row[i] - 1.0).abs() < 1e-12);
        }
        let q: Vec<Vec<u32>> = corpus.iter().map(|r| vocab.wrap_truncated(&vocab.encode(&r.doc), 128)).collect();
        let b = 16;
        let qs: Vec<&[u32]> = q[..b].iter().map(|v| v.as_slice()).collect();
        let cs: Vec<&[u32]> = code[..b].iter().map(|v| v.as_slice()).collect();
        let (loss, _) = search_loss(&p, &qs, &cs, 0.05, Exec::default()).unwrap();
        let ln_b = (b as f64).ln();
        assert!((loss - ln_b).abs() < 0.15 * ln_b, "loss {loss} vs ln B {ln_b}");
    }

    #[test]
    fn clone_head_is_symmetric_and_bounded() {
        let (vocab, corpus, mut p) = setup(1);
        add_task_head(&mut p, TaskKind::Clone, &RngStream::new(2)).unwrap();
        let a = vocab.wrap(&vocab.encode(&corpus[0].code));
        let b = vocab.wrap(&vocab.encode(&corpus[1].code));
        let ab = clone_probability(&p, &a, &b).unwrap();
        let ba = clone_probability(&p, &b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!(ab > 0.0 && ab < 1.0);
        // Gradients of a swapped pair equal those of the original order.
        let (l1, g1) = clone_loss(&p, &[(&a, &b, true)], Exec::default()).unwrap();
        let (l2, g2) = clone_loss(&p, &[(&b, &a, true)], Exec::default()).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1.params(), g2.params());
    }

    #[test]
    fn frozen_groups_receive_no_gradient() {
        let (vocab, corpus, mut p) = setup(2);
        add_task_head(&mut p, TaskKind::Completion, &RngStream::new(2)).unwrap();
        apply_freeze(&mut p, Some(1), true).unwrap();
        let data = build_completion_data(&corpus, &vocab, &RngStream::new(0));
        let batch: Vec<&CompletionExample> = data.examples.iter().take(4).collect();
        let (_, g) = completion_loss(&p, &batch, &vocab, Exec::default()).unwrap();
        for (id, _) in g.params() {
            assert!(p.param(*id).trainable, "{}", p.param(*id).name);
        }
        assert!(g.param(p.set.id(COMPLETION_WEIGHT).unwrap()).is_some());
        assert!(g.param(p.set.id("layer.2.attn.wq").unwrap()).is_some());
    }

    /// Overfitting a handful of programs must make greedy decoding reproduce
    /// their next lines.
    #[test]
    fn completion_memorizes_small_set() {
        let (vocab, corpus, mut p) = setup(2);
        add_task_head(&mut p, TaskKind::Completion, &RngStream::new(2)).unwrap();
        apply_freeze(&mut p, None, true).unwrap();
        let data = build_completion_data(&corpus[..20], &vocab, &RngStream::new(0));
        let batch: Vec<&CompletionExample> = data.examples.iter().collect();
        let mut state = AdamState::init(&p.set);
        let cfg = AdamConfig::with_lr(3e-3);
        for _ in 0..150 {
            let (_, g) = completion_loss(&p, &batch, &vocab, Exec::default()).unwrap();
            p.set.zero_grad();
            p.set.accumulate(&g).unwrap();
            adam_step(&mut p.set, &mut state, &cfg).unwrap();
        }
        let mut hits = 0;
        for e in &batch {
            let (out, _) = complete_line(&p, &e.context, &vocab, 24).unwrap();
            hits += usize::from(out == e.target);
        }
        assert!(hits as f64 >= 0.9 * batch.len() as f64, "{hits}/{}", batch.len());
        let again = complete_line(&p, &batch[0].context, &vocab, 24).unwrap();
        assert_eq!(again, complete_line(&p, &batch[0].context, &vocab, 24).unwrap());
    }

    #[test]
    fn long_context_is_truncated() {
        let (vocab, _, mut p) = setup(1);
        add_task_head(&mut p, TaskKind::Completion, &RngStream::new(2)).unwrap();
        let ctx = vec![vocab.id("x"); 300];
        let (out, truncated) = complete_line(&p, &ctx, &vocab, 3).unwrap();
        assert!(truncated);
        assert!(out.len() <= 3);
    }
}
