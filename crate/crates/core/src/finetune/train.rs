use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::heads::{clone_loss, clone_probs_pooled, completion_loss};
use super::{
    add_task_head, apply_freeze, complete_line, frozen_checksum, pooled_last, search_loss, search_scores,
    FinetuneError, TaskData, TaskKind, TaskSpec,
};
use crate::corpus::{Split, Vocabulary};
use crate::metrics::{edit_sim, exact_match, mrr, prf, rank_of, recall_at_k};
use crate::model::EncoderParams;
use crate::numcore::{adam_step, AdamConfig, AdamState, Gradients, RngStream, Scalar};
use crate::par::{self, Exec};
use crate::report::config_hash;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seeds: Vec<u64>,
    /// Hard cap on optimizer steps per run.
    pub max_steps: Option<usize>,
    pub clip_norm: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            seeds: vec![0, 1, 2],
            max_steps: None,
            clip_norm: Some(1.0),
        }
    }
}

/// One seed's run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub steps: usize,
    /// Training wall time of every epoch.
    pub epoch_times: Vec<f64>,
    /// Mean epoch time with the first (warm-up) epoch left out.
    pub epoch_seconds: f64,
    pub convergence_seconds: f64,
    pub train_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub task: TaskKind,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub params_trainable: u64,
    /// Trainable count of full fine-tuning with the same head.
    pub params_base: u64,
    pub params_reduction_pct: f64,
    pub head_params: u64,
    /// Median over seeds.
    pub epoch_seconds: f64,
    /// Median over seeds.
    pub convergence_seconds: f64,
    /// Seed means.
    pub metrics: BTreeMap<String, f64>,
    /// Relative change vs the base run, in percent; empty outside sweeps.
    pub delta_pct: BTreeMap<String, f64>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedRun>,
    pub frozen_checksum: String,
    pub timing_note: String,
    pub config_hash: String,
}

impl RunReport {
    pub fn label(k: Option<usize>) -> String {
        k.map_or_else(|| "base".to_string(), |k| format!("telly-{k}"))
    }
}

/// The report plus the kept (best-epoch) model of every seed.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    pub report: RunReport,
    pub models: Vec<EncoderParams<T>>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Task metrics of `params` on one split.
pub fn evaluate<T: Scalar>(
    spec: &TaskSpec,
    vocab: &Vocabulary,
    params: &EncoderParams<T>,
    split: Split,
    exec: Exec,
) -> Result<BTreeMap<String, f64>, FinetuneError> {
    let idx = spec.data.indices(split);
    if idx.is_empty() {
        return Err(FinetuneError::Dataset(format!("no {split:?} examples")));
    }
    let mut m = BTreeMap::new();
    match &spec.data {
        TaskData::Search(d) => {
            let q: Vec<Vec<u32>> = idx.iter().map(|&i| d.query[i].clone()).collect();
            let c: Vec<Vec<u32>> = idx.iter().map(|&i| d.code[i].clone()).collect();
            let scores = search_scores(params, &q, &c, exec)?;
            let ranks: Vec<usize> = scores.iter().enumerate().map(|(i, s)| rank_of(s, i)).collect();
            m.insert("mrr".into(), mrr(&ranks)?);
            for k in [1, 5, 10] {
                m.insert(format!("r@{k}"), recall_at_k(&ranks, k)?);
            }
        }
        TaskData::Clone(d) => {
            let mut seq_ids: Vec<usize> = idx.iter().flat_map(|&i| [d.pairs[i].a, d.pairs[i].b]).collect();
            seq_ids.sort_unstable();
            seq_ids.dedup();
            let pooled = par::try_map(exec, &seq_ids, |&s| pooled_last(params, &d.seqs[s]))?;
            let at = |s: usize| &pooled[seq_ids.binary_search(&s).expect("pooled every used sequence")];
            let pairs: Vec<(&[f64], &[f64])> =
                idx.iter().map(|&i| (at(d.pairs[i].a).as_slice(), at(d.pairs[i].b).as_slice())).collect();
            let probs = clone_probs_pooled(params, &pairs)?;
            let pred: Vec<bool> = probs.iter().map(|p| *p > 0.5).collect();
            let gold: Vec<bool> = idx.iter().map(|&i| d.pairs[i].label).collect();
            let r = prf(&pred, &gold)?;
            m.insert("precision".into(), r.precision);
            m.insert("recall".into(), r.recall);
            m.insert("f1".into(), r.f1);
        }
        TaskData::Completion(d) => {
            let scored = par::try_map(exec, &idx, |&i| -> Result<(f64, f64), FinetuneError> {
                let e = &d.examples[i];
                let (out, _) = complete_line(params, &e.context, vocab, spec.max_gen)?;
                let (got, want) = (vocab.decode(&out), vocab.decode(&e.target));
                Ok((edit_sim(&got, &want), if exact_match(&got, &want) { 1.0 } else { 0.0 }))
            })?;
            let n = scored.len() as f64;
            m.insert("edit_sim".into(), scored.iter().map(|s| s.0).sum::<f64>() / n);
            m.insert("em".into(), scored.iter().map(|s| s.1).sum::<f64>() / n);
        }
    }
    Ok(m)
}

fn batch_grads<T: Scalar>(
    spec: &TaskSpec,
    vocab: &Vocabulary,
    params: &EncoderParams<T>,
    batch: &[usize],
    exec: Exec,
) -> Result<(f64, Gradients<T>), FinetuneError> {
    match &spec.data {
        TaskData::Search(d) => {
            let q: Vec<&[u32]> = batch.iter().map(|&i| d.query[i].as_slice()).collect();
            let c: Vec<&[u32]> = batch.iter().map(|&i| d.code[i].as_slice()).collect();
            search_loss(params, &q, &c, spec.tau, exec)
        }
        TaskData::Clone(d) => {
            let pairs: Vec<(&[u32], &[u32], bool)> = batch
                .iter()
                .map(|&i| {
                    let p = &d.pairs[i];
                    (d.seqs[p.a].as_slice(), d.seqs[p.b].as_slice(), p.label)
                })
                .collect();
            clone_loss(params, &pairs, exec)
        }
        TaskData::Completion(d) => {
            let ex: Vec<_> = batch.iter().map(|&i| &d.examples[i]).collect();
            completion_loss(params, &ex, vocab, exec)
        }
    }
}

#[derive(Serialize)]
struct HashInput<'a> {
    task: TaskKind,
    k: Option<usize>,
    cfg: &'a FinetuneConfig,
    tau: f64,
    max_gen: usize,
    model: &'a str,
}

fn run_seed<T: Scalar>(
    spec: &TaskSpec,
    vocab: &Vocabulary,
    model: &mut EncoderParams<T>,
    cfg: &FinetuneConfig,
    seed: u64,
    exec: Exec,
) -> Result<(SeedRun, EncoderParams<T>), FinetuneError> {
    let kind = spec.kind;
    let root = RngStream::new(seed).derive("finetune");
    let adam = AdamConfig { clip_norm: cfg.clip_norm, ..AdamConfig::with_lr(cfg.lr) };
    let mut state = AdamState::init(&model.set);
    let train = spec.data.indices(Split::Train);
    let min_batch = if kind == TaskKind::Search { 2 } else { 1 };
    if train.len() < min_batch {
        return Err(FinetuneError::Dataset("not enough training examples".into()));
    }
    let start = Instant::now();
    let mut best: Option<(f64, EncoderParams<T>, usize, f64)> = None;
    let (mut epoch_times, mut losses) = (Vec::new(), Vec::new());
    let mut steps = 0usize;
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;
    'epochs: for epoch in 0..cfg.max_epochs {
        let mut order = train.clone();
        root.derive(&format!("epoch/{epoch}")).shuffle(&mut order);
        let t0 = Instant::now();
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let mut capped = false;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            if batch.len() < min_batch {
                continue;
            }
            let (loss, grads) = batch_grads(spec, vocab, model, batch, exec)?;
            model.set.zero_grad();
            model.set.accumulate(&grads)?;
            adam_step(&mut model.set, &mut state, &adam)?;
            loss_sum += loss;
            batches += 1;
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                capped = true;
                break;
            }
        }
        epoch_times.push(t0.elapsed().as_secs_f64());
        losses.push(loss_sum / batches.max(1) as f64);
        epochs_run += 1;
        model.set.zero_grad();
        let valid = evaluate(spec, vocab, model, Split::Valid, exec)?[kind.primary_metric()];
        if best.as_ref().is_none_or(|b| valid > b.0) {
            best = Some((valid, model.clone(), epoch + 1, start.elapsed().as_secs_f64()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if capped || since_best >= cfg.patience {
            break 'epochs;
        }
    }
    let (_, kept, best_epoch, convergence) = best.ok_or_else(|| FinetuneError::Dataset("no epochs ran".into()))?;
    let metrics = evaluate(spec, vocab, &kept, Split::Test, exec)?;
    let timed = if epoch_times.len() > 1 { &epoch_times[1..] } else { &epoch_times[..] };
    let run = SeedRun {
        seed,
        metrics,
        best_epoch,
        epochs_run,
        steps,
        epoch_seconds: timed.iter().sum::<f64>() / timed.len() as f64,
        epoch_times,
        convergence_seconds: convergence,
        train_losses: losses,
    };
    Ok((run, kept))
}

/// Fine-tunes one Telly-K configuration (`k = None` trains everything) for
/// every seed and checks that frozen parameters never moved.
pub fn finetune<T: Scalar>(
    spec: &TaskSpec,
    vocab: &Vocabulary,
    base: &EncoderParams<T>,
    k: Option<usize>,
    cfg: &FinetuneConfig,
    exec: Exec,
) -> Result<FinetuneOutcome<T>, FinetuneError> {
    let lm = spec.kind.uses_lm_head();
    let mut runs = Vec::new();
    let mut models = Vec::new();
    let mut plan = None;
    let mut params_base = 0;
    let mut frozen_sum = String::new();
    for &seed in &cfg.seeds {
        let mut model = base.clone();
        add_task_head(&mut model, spec.kind, &RngStream::new(seed).derive("head"))?;
        params_base = apply_freeze(&mut model, None, lm)?.trainable;
        let p = apply_freeze(&mut model, k, lm)?;
        let before = frozen_checksum(&model);
        let (run, kept) = run_seed(spec, vocab, &mut model, cfg, seed, exec)?;
        for after in [frozen_checksum(&model), frozen_checksum(&kept)] {
            if after != before {
                return Err(FinetuneError::FrozenDrift { before, after });
            }
        }
        frozen_sum = before;
        plan = Some(p);
        runs.push(run);
        models.push(kept);
    }
    let plan = plan.ok_or_else(|| FinetuneError::Dataset("no seeds given".into()))?;
    let mut metrics = BTreeMap::new();
    for name in spec.kind.metrics() {
        let mean = runs.iter().map(|r| r.metrics[*name]).sum::<f64>() / runs.len() as f64;
        metrics.insert(name.to_string(), mean);
    }
    let model_name = RunReport::label(k);
    let report = RunReport {
        task: spec.kind,
        k,
        params_trainable: plan.trainable,
        params_base,
        params_reduction_pct: 100.0 * (1.0 - plan.trainable as f64 / params_base as f64),
        head_params: plan.head_trainable,
        epoch_seconds: median(runs.iter().map(|r| r.epoch_seconds).collect()),
        convergence_seconds: median(runs.iter().map(|r| r.convergence_seconds).collect()),
        metrics,
        delta_pct: BTreeMap::new(),
        seeds: cfg.seeds.clone(),
        per_seed: runs,
        frozen_checksum: frozen_sum,
        timing_note: format!(
            "noisy: monotonic clock, median over {} seed runs, warm-up epoch excluded",
            cfg.seeds.len()
        ),
        config_hash: config_hash(&HashInput {
            task: spec.kind,
            k,
            cfg,
            tau: spec.tau,
            max_gen: spec.max_gen,
            model: &base.set.checksum(),
        }),
        model: model_name,
    };
    Ok(FinetuneOutcome { report, models })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_runs() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0]), 2.5);
        assert_eq!(median(vec![]), 0.0);
    }
}
