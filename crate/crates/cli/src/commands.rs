//! One function per subcommand. Each writes its artifacts under the output
//! directory and returns its result for the caller to inspect.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use codelayers::finetune::{
    finetune, sweep, sweep_csv_rows, FinetuneError, RunReport, SweepTable,
};
use codelayers::model::{param_count, per_layer_count, pretrain, save_checkpoint, ModelConfig, ParamCount};
use codelayers::numcore::Scalar;
use codelayers::par::Exec;
use codelayers::probes::{layer_contributions, train_probe, LayerContribution, ProbeReport, ProbeTask, RepSource};
use codelayers::rsa::{rsa_compare, sample_snippets, RsaOptions, RsaReport};

use crate::config::ExperimentConfig;
use crate::output::{read_artifact, read_csv, Artifact, Outputs, TIMING_NOTE};
use crate::pipeline::{Experiment, VOCAB_FILE};

pub const PRETRAINED_CKPT: &str = "pretrained.ckpt";
/// Window of the non-overlapping loss means checked for monotonicity.
pub const SMOOTHING_WINDOW: usize = 50;

fn outputs(cfg: &ExperimentConfig, command: &str) -> Outputs {
    Outputs { dir: cfg.out.clone(), command: command.into(), config_hash: cfg.hash(), seeds: cfg.seeds.clone() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub note: String,
    pub seconds: f64,
}

impl Timing {
    fn since(t: Instant) -> Self {
        Timing { note: TIMING_NOTE.into(), seconds: t.elapsed().as_secs_f64() }
    }
}

/// Means of consecutive `window`-step blocks; a trailing partial block is
/// dropped.
pub fn window_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses.chunks_exact(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    /// SHA-256 of the checkpoint payload.
    pub checkpoint_sha256: String,
    pub sequences: usize,
    pub vocab_size: usize,
    pub steps: usize,
    pub skipped_batches: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub smoothing_window: usize,
    pub smoothed: Vec<f64>,
    pub smoothed_decreasing: bool,
    pub timing: Timing,
}

/// Masked-LM pretraining from the configured seed. Writes the checkpoint,
/// the vocabulary and the per-step loss curve.
pub fn cmd_pretrain<T: Scalar>(cfg: &ExperimentConfig, exec: Exec) -> Result<PretrainSummary> {
    let t = Instant::now();
    let exp = Experiment::prepare(cfg)?;
    let seqs = exp.pretrain_sequences();
    let mut params = exp.random_model::<T>()?;
    let pc = codelayers::model::PretrainConfig { seed: cfg.seed, ..cfg.pretrain.clone() };
    let log = pretrain(&mut params, &seqs, &pc, exec)?;
    if log.losses.is_empty() {
        bail!("pretraining ran no steps");
    }
    let out = outputs(cfg, "pretrain");
    fs::create_dir_all(&out.dir).with_context(|| format!("creating {}", out.dir.display()))?;
    exp.vocab.save(&out.path(VOCAB_FILE))?;
    let ckpt = out.path(PRETRAINED_CKPT);
    let header = save_checkpoint(&params, &ckpt)?;
    let rows: Vec<Vec<String>> =
        log.losses.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), format!("{l:.8}")]).collect();
    out.csv("loss_curve.csv", &["step", "loss"], &rows)?;
    let smoothed = window_means(&log.losses, SMOOTHING_WINDOW);
    let summary = PretrainSummary {
        checkpoint: ckpt,
        checkpoint_sha256: header.payload_sha256,
        sequences: seqs.len(),
        vocab_size: exp.vocab.len(),
        steps: log.losses.len(),
        skipped_batches: log.skipped,
        first_loss: log.losses[0],
        final_loss: *log.losses.last().expect("nonempty"),
        smoothing_window: SMOOTHING_WINDOW,
        smoothed_decreasing: strictly_decreasing(&smoothed),
        smoothed,
        timing: Timing::since(t),
    };
    out.json("pretrain.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub task: ProbeTask,
    pub metric: String,
    pub random: f64,
    pub pretrained: f64,
    pub finetuned: Option<f64>,
    /// Pretrained minus random, in points.
    pub margin: f64,
    /// Whether pretrained representations beat random ones.
    pub direction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub rows: Vec<ProbeRow>,
    pub reports: Vec<ProbeReport>,
}

fn source_name(s: RepSource) -> &'static str {
    match s {
        RepSource::Random => "random",
        RepSource::Pretrained => "pretrained",
        RepSource::Finetuned => "finetuned",
    }
}

/// Probes random-init, pretrained and (optionally) fine-tuned encoders on
/// each task and flags whether pretrained beats random.
pub fn cmd_probe<T: Scalar>(
    cfg: &ExperimentConfig,
    tasks: &[ProbeTask],
    checkpoint: &Path,
    finetuned: Option<&Path>,
    exec: Exec,
) -> Result<ProbeSummary> {
    let exp = Experiment::for_checkpoint(cfg, checkpoint)?;
    let pre = exp.load_model::<T>(checkpoint)?;
    let random = codelayers::model::EncoderParams::<T>::init(&pre.config, &codelayers::numcore::RngStream::new(cfg.seed))?;
    let fine = finetuned.map(|p| exp.load_model::<T>(p)).transpose()?;
    let pc = cfg.probe_config();
    let out = outputs(cfg, "probe");
    let mut summary = ProbeSummary { rows: Vec::new(), reports: Vec::new() };
    for &task in tasks {
        let data = exp.probe_dataset(task)?;
        let mut run = |p: &codelayers::model::EncoderParams<T>, s: RepSource| -> Result<f64> {
            let r = train_probe(p, &data, s, &pc, exec)?;
            out.json(&format!("probe_{}_{}.json", task.name(), source_name(s)), &r)?;
            let m = r.metric_pct;
            summary.reports.push(r);
            Ok(m)
        };
        let r = run(&random, RepSource::Random)?;
        let p = run(&pre, RepSource::Pretrained)?;
        let f = fine.as_ref().map(|m| run(m, RepSource::Finetuned)).transpose()?;
        summary.rows.push(ProbeRow {
            task,
            metric: task.metric_name().into(),
            random: r,
            pretrained: p,
            finetuned: f,
            margin: p - r,
            direction: if r < p { "PASS" } else { "FAIL" }.into(),
        });
    }
    let fmt = |v: f64| format!("{v:.4}");
    let rows: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            vec![
                r.task.name().into(),
                r.metric.clone(),
                fmt(r.random),
                fmt(r.pretrained),
                r.finetuned.map_or(String::new(), fmt),
                fmt(r.margin),
                r.direction.clone(),
            ]
        })
        .collect();
    out.csv("probe_summary.csv", &["task", "metric", "random", "pretrained", "finetuned", "margin", "direction"], &rows)?;
    out.json("probe_summary.json", &summary.rows)?;
    Ok(summary)
}

/// Layer-wise RSA of two checkpoints on `rsa_n` sampled snippets.
pub fn cmd_rsa<T: Scalar>(cfg: &ExperimentConfig, a: &Path, b: &Path, exec: Exec) -> Result<RsaReport> {
    let exp = Experiment::for_checkpoint(cfg, a)?;
    let pa = exp.load_model::<T>(a)?;
    let pb = exp.load_model::<T>(b)?;
    let sample = sample_snippets(&exp.corpus, cfg.rsa_n, cfg.seed)?;
    let seqs = sample.encode(&exp.corpus, &exp.vocab, pa.config.max_positions);
    let opts = RsaOptions {
        model_a: a.display().to_string(),
        model_b: b.display().to_string(),
        pooling: cfg.pooling,
        exec,
    };
    let report = rsa_compare(&pa, &pb, &sample, &seqs, &opts)?;
    let out = outputs(cfg, "rsa");
    out.json("rsa.json", &report)?;
    let rows: Vec<Vec<String>> = report
        .layers
        .iter()
        .map(|l| vec![l.l.to_string(), format!("{:.12}", l.rho), l.band.label().to_string()])
        .collect();
    out.csv("rsa.csv", &["layer", "rho", "band"], &rows)?;
    Ok(report)
}

/// Fine-tunes under Telly-K (`cfg.freeze`, `None` = full) and saves the
/// first seed's kept model as `finetuned.ckpt` next to `runreport.json`.
pub fn cmd_finetune<T: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path, exec: Exec) -> Result<RunReport> {
    let exp = Experiment::for_checkpoint(cfg, checkpoint)?;
    let base = exp.load_model::<T>(checkpoint)?;
    let spec = exp.task_spec(cfg.task)?;
    let outcome = finetune(&spec, &exp.vocab, &base, cfg.freeze, &cfg.finetune_config(), exec)?;
    let out = outputs(cfg, "finetune");
    out.json("runreport.json", &outcome.report)?;
    save_checkpoint(&outcome.models[0], &out.path("finetuned.ckpt"))?;
    fs::copy(crate::pipeline::vocab_path(checkpoint), out.path(VOCAB_FILE)).ok();
    Ok(outcome.report)
}

/// Base run plus Telly-K for every `k`, written to `sweep.csv` and
/// `sweep.json`. Frozen drift in any run is reported as an error after the
/// table is written.
pub fn cmd_sweep<T: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path, ks: &[usize], exec: Exec) -> Result<SweepTable> {
    let exp = Experiment::for_checkpoint(cfg, checkpoint)?;
    let base = exp.load_model::<T>(checkpoint)?;
    if let Some(&k) = ks.iter().find(|&&k| k > base.config.num_layers) {
        return Err(FinetuneError::from(codelayers::model::ModelError::FreezeRange { k, layers: base.config.num_layers }).into());
    }
    let spec = exp.task_spec(cfg.task)?;
    let table = sweep(&spec, &exp.vocab, &base, ks, &cfg.finetune_config(), exec);
    let out = outputs(cfg, "sweep");
    let (header, rows) = sweep_csv_rows(&table);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("sweep.csv", &header, &rows)?;
    out.json("sweep.json", &table)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRow {
    pub model: String,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub trainable: u64,
    pub encoder_trainable: u64,
    pub frozen: u64,
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsTable {
    pub config: ModelConfig,
    pub per_layer: u64,
    pub embedding: u64,
    pub lm_head: u64,
    pub total: u64,
    /// Whether the output projection trains (only completion reads it).
    pub lm_head_trainable: bool,
    pub rows: Vec<ParamsRow>,
}

/// Closed-form accounting for the base run and every K (or just `only`).
pub fn params_table(config: &ModelConfig, lm_head_trainable: bool, only: Option<usize>) -> Result<ParamsTable> {
    let count = |k| -> Result<ParamCount> { Ok(param_count(config, k, !lm_head_trainable)?) };
    let base = count(None)?;
    let ks: Vec<Option<usize>> = match only {
        Some(k) => vec![Some(k)],
        None => (0..=config.num_layers).map(Some).collect(),
    };
    let rows = std::iter::once(None)
        .chain(ks)
        .map(|k| {
            let c = count(k)?;
            Ok(ParamsRow {
                model: RunReport::label(k),
                k,
                trainable: c.trainable,
                encoder_trainable: c.encoder_trainable,
                frozen: c.frozen,
                reduction_pct: 100.0 * (1.0 - c.trainable as f64 / base.trainable as f64),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamsTable {
        config: config.clone(),
        per_layer: per_layer_count(config),
        embedding: base.per_group[0],
        lm_head: base.lm_head,
        total: base.total,
        lm_head_trainable,
        rows,
    })
}

/// Human-readable form of a [`ParamsTable`].
pub fn render_params_table(t: &ParamsTable) -> String {
    let mut s = format!(
        "layers={} hidden={} ffn={} vocab={} positions={}\nper_layer={} embedding={} lm_head={} total={}\n",
        t.config.num_layers,
        t.config.hidden_dim,
        t.config.ffn_dim,
        t.config.vocab_size,
        t.config.max_positions,
        t.per_layer,
        t.embedding,
        t.lm_head,
        t.total
    );
    s += &format!("{:<10} {:>14} {:>18} {:>14} {:>10}\n", "model", "trainable", "encoder_trainable", "frozen", "reduction");
    for r in &t.rows {
        s += &format!(
            "{:<10} {:>14} {:>18} {:>14} {:>9.2}%\n",
            r.model, r.trainable, r.encoder_trainable, r.frozen, r.reduction_pct
        );
    }
    s
}

pub fn cmd_params(cfg: &ExperimentConfig, config: &ModelConfig) -> Result<(ParamsTable, String)> {
    let t = params_table(config, cfg.task.uses_lm_head(), cfg.freeze)?;
    let text = render_params_table(&t);
    let out = outputs(cfg, "params");
    out.json("params.json", &t)?;
    fs::create_dir_all(&out.dir)?;
    fs::write(out.path("params.txt"), &text)?;
    Ok((t, text))
}

fn probe_reports(dir: &Path) -> Result<Vec<ProbeReport>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("probe_") && name.ends_with(".json") && name != "probe_summary.json"
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(read_artifact::<ProbeReport>(p)?.result)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub contributions: Vec<LayerContribution>,
    /// Observed, not asserted: where lexical and structural mass sits.
    pub observations: Vec<String>,
}

/// Layer contributions (λ and its ranking) of every probe report in the
/// output directory.
pub fn cmd_analyze(cfg: &ExperimentConfig) -> Result<Analysis> {
    let reports = probe_reports(&cfg.out)?;
    if reports.is_empty() {
        bail!("no probe reports in {}; run `probe` first", cfg.out.display());
    }
    let contributions: Vec<LayerContribution> = reports.iter().map(layer_contributions).collect();
    let mut observations = Vec::new();
    for c in &contributions {
        let top = c.lambda.len() - 1;
        let low: f64 = c.lambda[..c.lambda.len().div_ceil(2)].iter().sum();
        match c.task {
            ProbeTask::Lexical => observations.push(format!(
                "lexical/{}: {:.1}% of λ mass in the lower half of layers",
                source_name(c.source),
                100.0 * low
            )),
            ProbeTask::Structural => observations.push(format!(
                "structural/{}: argmax layer {} (top is {top})",
                source_name(c.source),
                c.argmax
            )),
            _ => {}
        }
    }
    let a = Analysis { contributions, observations };
    outputs(cfg, "analyze").json("analysis.json", &a)?;
    Ok(a)
}

/// Markdown digest of whatever artifacts the output directory holds.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let dir = &cfg.out;
    let mut md = format!("# codelayers report\n\nconfig hash `{}`\n", cfg.hash());
    let p = dir.join("params.txt");
    if p.exists() {
        md += &format!("\n## Parameters\n\n```\n{}```\n", fs::read_to_string(&p)?);
    }
    let p = dir.join("pretrain.json");
    if p.exists() {
        let a: Artifact<PretrainSummary> = read_artifact(&p)?;
        let r = a.result;
        md += &format!(
            "\n## Pretraining\n\n{} steps, loss {:.4} -> {:.4}, checkpoint sha256 `{}`\n",
            r.steps, r.first_loss, r.final_loss, r.checkpoint_sha256
        );
    }
    let sections: [(&str, &str); 3] =
        [("probe_summary.csv", "Probes"), ("rsa.csv", "RSA"), ("sweep.csv", "Telly-K sweep")];
    for (file, title) in sections {
        let p = dir.join(file);
        if !p.exists() {
            continue;
        }
        let (header, rows) = read_csv(&p)?;
        md += &format!("\n## {title}\n\n| {} |\n|{}|\n", header.join(" | "), vec!["---"; header.len()].join("|"));
        for r in rows {
            md += &format!("| {} |\n", r.join(" | "));
        }
    }
    let p = dir.join("runreport.json");
    if p.exists() {
        let a: Artifact<RunReport> = read_artifact(&p)?;
        let r = a.result;
        md += &format!(
            "\n## Fine-tuning\n\n{} on {}: {} trainable ({:.2}% fewer than base), metrics {:?}\n",
            r.model,
            r.task.name(),
            r.params_trainable,
            r.params_reduction_pct,
            r.metrics
        );
    }
    let p = dir.join("analysis.json");
    if p.exists() {
        let a: Artifact<Analysis> = read_artifact(&p)?;
        md += "\n## Layer contributions\n\n";
        for c in &a.result.contributions {
            let lam: Vec<String> = c.lambda.iter().map(|v| format!("{v:.3}")).collect();
            md += &format!("- {}/{}: λ = [{}], argmax {}\n", c.task.name(), source_name(c.source), lam.join(", "), c.argmax);
        }
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.md"), &md)?;
    Ok(md)
}
