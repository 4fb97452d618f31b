use serde::{Deserialize, Serialize};

use super::{extract_features, Features, ProbeDataset, ProbeError, ProbeTask, RepSource};
use crate::corpus::Split;
use crate::metrics::{accuracy, mean_average_precision};
use crate::model::EncoderParams;
use crate::numcore::{adam_step, AdamConfig, AdamState, Graph, NumError, ParamSet, RngStream, Scalar, Tensor, Var};
use crate::par::{self, Exec};
use crate::report::config_hash;

/// Softmax-normalized layer weights λ₀…λ_L over learnable logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMixer {
    pub logits: Vec<f64>,
}

impl LayerMixer {
    /// All-zero logits, i.e. λ = 1/(L+1) everywhere.
    pub fn uniform(layers: usize) -> Self {
        LayerMixer { logits: vec![0.0; layers] }
    }

    pub fn weights(&self) -> Vec<f64> {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|a| (a - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seeds: Vec<u64>,
    /// Temperature of the semantic probe's contrastive loss.
    pub tau: f64,
    /// Z-score features with training-split statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { lr: 1e-4, batch_size: 32, max_epochs: 30, patience: 5, seeds: vec![0, 1, 2], tau: 0.1, standardize: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_metric: f64,
    pub valid_metric: f64,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub source: RepSource,
    pub metric_name: String,
    /// Seed-averaged test metric in [0,1].
    pub metric: f64,
    pub metric_pct: f64,
    /// Seed-averaged λ.
    pub lambda: Vec<f64>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
    pub head: String,
    pub sizes: [usize; 3],
    pub model_checksum: String,
    pub config_hash: String,
}

struct Head {
    mixer: usize,
    w: usize,
    b: usize,
}

fn init_head(task: ProbeTask, data: &ProbeDataset, feats: &Features, seed: u64) -> Result<(ParamSet<f32>, Head), ProbeError> {
    let d = feats.dim();
    let input = if feats.b.is_some() { 4 * d } else { d };
    let out = if task == ProbeTask::Semantic { d } else { data.num_classes };
    let mut r = RngStream::new(seed).derive("probe/init");
    let mut ps = ParamSet::new();
    let mixer = ps.add("mixer.logits", Tensor::zeros(&[feats.num_layers()]), true)?;
    let wv = (0..input * out).map(|_| r.trunc_normal(0.02) as f32).collect();
    let w = ps.add("head.w", Tensor::new(vec![input, out], wv)?, true)?;
    let b = ps.add("head.b", Tensor::zeros(&[out]), true)?;
    Ok((ps, Head { mixer, w, b }))
}

fn gather(m: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let d = m.cols();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(m.row(i));
    }
    Tensor::new(vec![idx.len(), d], out).expect("row gather")
}

/// Records mixer, pair composition and linear head for the examples `idx`.
fn head_forward(g: &mut Graph<f32>, ps: &ParamSet<f32>, h: &Head, feats: &Features, idx: &[usize], grad: bool) -> Result<Var, NumError> {
    let a = g.param_with(h.mixer, ps.get(h.mixer), grad)?;
    let lam = g.softmax(a, 0)?;
    let mix = |g: &mut Graph<f32>, mats: &[Tensor<f32>]| -> Result<Var, NumError> {
        let vars: Vec<Var> = mats.iter().map(|m| g.constant(gather(m, idx))).collect::<Result<_, _>>()?;
        g.mix(lam, &vars)
    };
    let u = mix(g, &feats.a)?;
    let x = match &feats.b {
        Some(b) => {
            let v = mix(g, b)?;
            let prod = g.mul(u, v)?;
            let diff = g.sub(u, v)?;
            let ad = g.abs(diff)?;
            g.concat_cols(&[u, v, prod, ad])?
        }
        None => u,
    };
    let w = g.param_with(h.w, ps.get(h.w), grad)?;
    let b = g.param_with(h.b, ps.get(h.b), grad)?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Test or validation metric of the current head on one split.
fn evaluate(task: ProbeTask, ps: &ParamSet<f32>, h: &Head, feats: &Features, data: &ProbeDataset, split: Split) -> Result<f64, ProbeError> {
    let idx: Vec<usize> = data.split(split).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(ProbeError::Dataset(format!("empty {split:?} split")));
    }
    let labels: Vec<usize> = idx.iter().map(|&i| data.examples[i].label).collect();
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(1024) {
        let mut g = Graph::new();
        let y = head_forward(&mut g, ps, h, feats, chunk, false)?;
        let t = g.value(y);
        outputs.extend((0..t.rows()).map(|r| t.row(r).iter().map(|v| *v as f64).collect()));
    }
    if task == ProbeTask::Semantic {
        return Ok(mean_average_precision(&outputs, &labels)?);
    }
    let pred: Vec<usize> = outputs
        .iter()
        .map(|row| row.iter().enumerate().fold(0, |best, (j, v)| if *v > row[best] { j } else { best }))
        .collect();
    Ok(accuracy(&pred, &labels)?)
}

fn train_seed(task: ProbeTask, data: &ProbeDataset, feats: &Features, cfg: &ProbeConfig, seed: u64) -> Result<SeedResult, ProbeError> {
    let (mut ps, h) = init_head(task, data, feats, seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::init(&ps);
    let mut order: Vec<usize> = data.split(Split::Train).map(|(i, _)| i).collect();
    if order.is_empty() {
        return Err(ProbeError::Dataset("empty training split".into()));
    }
    let mut rng = RngStream::new(seed).derive(&format!("probe/{}", task.name()));
    let mut best = (f64::NEG_INFINITY, 0usize, ps.clone());
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let labels: Vec<usize> = batch.iter().map(|&i| data.examples[i].label).collect();
            let mut g = Graph::new();
            let y = head_forward(&mut g, &ps, &h, feats, batch, true)?;
            let loss = if task == ProbeTask::Semantic {
                let z = g.normalize_rows(y)?;
                match g.sup_con(z, &labels, cfg.tau) {
                    Ok(l) => l,
                    // no positive pair in this batch
                    Err(NumError::Invalid(_)) => continue,
                    Err(e) => return Err(e.into()),
                }
            } else {
                g.cross_entropy(y, &labels)?
            };
            let grads = g.backward(loss)?;
            ps.zero_grad();
            ps.accumulate(&grads)?;
            adam_step(&mut ps, &mut state, &adam)?;
        }
        let valid = evaluate(task, &ps, &h, feats, data, Split::Valid)?;
        if valid > best.0 {
            best = (valid, epoch, ps.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (valid_metric, best_epoch, kept) = best;
    let test_metric = evaluate(task, &kept, &h, feats, data, Split::Test)?;
    let logits: Vec<f64> = kept.get(h.mixer).value.data().iter().map(|v| *v as f64).collect();
    Ok(SeedResult {
        seed,
        test_metric,
        valid_metric,
        best_epoch,
        epochs_run,
        lambda: LayerMixer { logits }.weights(),
    })
}

/// Trains a mixer plus linear head on frozen features of `params` for every
/// configured seed and reports the seed-averaged test metric.
pub fn train_probe<T: Scalar>(
    params: &EncoderParams<T>,
    data: &ProbeDataset,
    source: RepSource,
    cfg: &ProbeConfig,
    exec: Exec,
) -> Result<ProbeReport, ProbeError> {
    let before = params.set.checksum();
    let mut feats = extract_features(params, data, exec)?;
    if cfg.standardize {
        let train: Vec<usize> = data.split(Split::Train).map(|(i, _)| i).collect();
        feats.standardize(&train);
    }
    let report = eval_probe(&feats, data, source, cfg, &before, exec)?;
    let after = params.set.checksum();
    if before != after {
        return Err(ProbeError::FrozenContract { before, after });
    }
    Ok(report)
}

/// Probe training on precomputed features.
pub fn eval_probe(
    feats: &Features,
    data: &ProbeDataset,
    source: RepSource,
    cfg: &ProbeConfig,
    model_checksum: &str,
    exec: Exec,
) -> Result<ProbeReport, ProbeError> {
    if cfg.seeds.is_empty() {
        return Err(ProbeError::Dataset("no seeds configured".into()));
    }
    let task = data.task;
    let per_seed = par::try_map(exec, &cfg.seeds, |&s| train_seed(task, data, feats, cfg, s))?;
    let n = per_seed.len() as f64;
    let metric = per_seed.iter().map(|r| r.test_metric).sum::<f64>() / n;
    let layers = feats.num_layers();
    let lambda: Vec<f64> = (0..layers).map(|l| per_seed.iter().map(|r| r.lambda[l]).sum::<f64>() / n).collect();
    let head = match (task, feats.b.is_some()) {
        (ProbeTask::Semantic, _) => format!("linear {d}->{d}, supervised contrastive tau={}", cfg.tau, d = feats.dim()),
        (_, true) => format!("linear [u;v;u*v;|u-v|] {}->{}", 4 * feats.dim(), data.num_classes),
        _ => format!("linear {}->{}", feats.dim(), data.num_classes),
    };
    let sizes = [data.count(Split::Train), data.count(Split::Valid), data.count(Split::Test)];
    let hash = config_hash(&(task, source, cfg, sizes, model_checksum, &head));
    Ok(ProbeReport {
        task,
        source,
        metric_name: task.metric_name().to_string(),
        metric,
        metric_pct: metric * 100.0,
        lambda,
        seeds: cfg.seeds.clone(),
        per_seed,
        head,
        sizes,
        model_checksum: model_checksum.to_string(),
        config_hash: hash,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerContribution {
    pub task: ProbeTask,
    pub source: RepSource,
    pub lambda: Vec<f64>,
    pub argmax: usize,
    /// Layers by descending weight.
    pub ranking: Vec<usize>,
    /// Argmax layer of each seed.
    pub per_seed_argmax: Vec<usize>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b })
}

pub fn layer_contributions(report: &ProbeReport) -> LayerContribution {
    let mut ranking: Vec<usize> = (0..report.lambda.len()).collect();
    ranking.sort_by(|&a, &b| report.lambda[b].total_cmp(&report.lambda[a]).then(a.cmp(&b)));
    LayerContribution {
        task: report.task,
        source: report.source,
        lambda: report.lambda.clone(),
        argmax: argmax(&report.lambda),
        ranking,
        per_seed_argmax: report.per_seed.iter().map(|s| argmax(&s.lambda)).collect(),
    }
}
