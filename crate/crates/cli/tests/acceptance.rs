//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release -p codelayers-cli --test acceptance`, optionally
//! followed by `-- 1 3 8` to pick criteria. Artifacts go to
//! `$ACCEPTANCE_OUT` (default: the cargo target tmpdir). Setting
//! `ACCEPTANCE_CHECKPOINT` to an existing `pretrained.ckpt` skips
//! pretraining.

#[path = "../../core/tests/common/gradsuite.rs"]
mod gradsuite;
#[path = "../../core/tests/common/metricsuite.rs"]
mod metricsuite;

use std::path::{Path, PathBuf};
use std::time::Instant;

use codelayers::codeprops::{build_cfg, connected_components, cyclomatic, lex_classify, parse, LexClass};
use codelayers::corpus::generate_toy_corpus;
use codelayers::finetune::{finetune, FinetuneConfig, TaskKind};
use codelayers::model::{group_of, param_count, EncoderParams, ModelConfig};
use codelayers::numcore::RngStream;
use codelayers::par::Exec;
use codelayers::probes::ProbeTask;
use codelayers::rsa::{
    compare_representations, random_orthogonal, repr_layers, rotate, rsa_compare, sample_snippets, RsaOptions,
};
use codelayers_cli::commands::{cmd_finetune, cmd_params, cmd_pretrain, cmd_probe, cmd_rsa, cmd_sweep};
use codelayers_cli::config::ExperimentConfig;
use codelayers_cli::pipeline::Experiment;

type Outcome = Result<String, String>;

struct Ctx {
    out: PathBuf,
    exec: Exec,
    /// Pretrained on first use, so the first criterion that needs it pays
    /// for pretraining.
    checkpoint: Option<PathBuf>,
}

impl Ctx {
    fn config(&self, sub: &str) -> ExperimentConfig {
        ExperimentConfig { out: self.out.join(sub), ..ExperimentConfig::default() }
    }

    fn checkpoint(&mut self) -> Result<PathBuf, String> {
        if let Some(p) = &self.checkpoint {
            return Ok(p.clone());
        }
        let t = Instant::now();
        let s = cmd_pretrain::<f32>(&self.config("pretrain"), self.exec).map_err(|e| e.to_string())?;
        println!(
            "  pretraining: {} steps, loss {:.3} -> {:.3}, {:.0}s",
            s.steps,
            s.first_loss,
            s.final_loss,
            t.elapsed().as_secs_f64()
        );
        self.checkpoint = Some(s.checkpoint.clone());
        Ok(s.checkpoint)
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn c1_params(ctx: &mut Ctx) -> Outcome {
    let cfg = ctx.config("params");
    let (t, _) = cmd_params(&cfg, &ModelConfig::paper_scale()).map_err(err)?;
    let k0 = t.rows.iter().find(|r| r.k == Some(0)).ok_or("no K=0 row")?;
    let mut steps_ok = true;
    for k in 1..=t.config.num_layers {
        let prev = t.rows.iter().find(|r| r.k == Some(k - 1)).ok_or("missing row")?;
        let cur = t.rows.iter().find(|r| r.k == Some(k)).ok_or("missing row")?;
        steps_ok &= prev.trainable - cur.trainable == t.per_layer;
    }
    check(
        t.per_layer == 7_087_872 && k0.encoder_trainable == 85_054_464 && steps_ok,
        format!(
            "per_layer={} K0 encoder_trainable={} successive differences equal per_layer: {steps_ok}",
            t.per_layer, k0.encoder_trainable
        ),
    )
}

/// Decision points counted from the token stream alone.
fn keyword_oracle(src: &str) -> Result<usize, String> {
    let toks = lex_classify(src).map_err(err)?;
    let n = toks
        .iter()
        .filter(|t| t.class == LexClass::Keyword && matches!(t.text.as_str(), "if" | "elif" | "while" | "for"))
        .count();
    Ok(n + 1)
}

fn c2_cyclomatic(_: &mut Ctx) -> Outcome {
    let src = "def sum_to(n):\n    total = 0\n    for i in range(n):\n        total = total + i\n    return total\n";
    let g = build_cfg(&parse(src).map_err(err)?).map_err(err)?;
    let example = (g.num_nodes(), g.num_edges(), connected_components(&g), cyclomatic(&g));
    let corpus = generate_toy_corpus(11, 100);
    let mut mismatches = 0;
    let mut max_m = 0;
    for r in &corpus {
        let m = cyclomatic(&build_cfg(&parse(&r.code).map_err(err)?).map_err(err)?);
        max_m = max_m.max(m);
        if m != keyword_oracle(&r.code)? {
            mismatches += 1;
        }
    }
    check(
        example == (7, 7, 1, 2) && mismatches == 0,
        format!(
            "example N={} E={} P={} M={}; {mismatches} mismatches on {} programs (max M {max_m})",
            example.0,
            example.1,
            example.2,
            example.3,
            corpus.len()
        ),
    )
}

fn c3_gradients(_: &mut Ctx) -> Outcome {
    let s = gradsuite::all();
    let worst = s.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failures: Vec<String> = s.failures().iter().map(|c| format!("{}={:.2e}", c.name, c.max_rel_err)).collect();
    check(
        failures.is_empty() && !s.cases.is_empty(),
        format!("{} checks, worst rel err {worst:.2e}; failing: {failures:?}", s.cases.len()),
    )
}

fn groups_upto<T: codelayers::numcore::Scalar>(p: &EncoderParams<T>, k: usize) -> String {
    p.set.checksum_where(|x| group_of(&x.name).is_some_and(|g| g <= k))
}

fn groups_above<T: codelayers::numcore::Scalar>(p: &EncoderParams<T>, k: usize) -> String {
    p.set.checksum_where(|x| group_of(&x.name).is_some_and(|g| g > k))
}

fn c4_freezing(ctx: &mut Ctx) -> Outcome {
    let exp = Experiment::prepare(&ctx.config("freeze")).map_err(err)?;
    let base = exp.random_model::<f32>().map_err(err)?;
    let l = base.config.num_layers;
    let cfg = FinetuneConfig {
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 1000,
        patience: 1000,
        seeds: vec![0],
        max_steps: Some(100),
        ..FinetuneConfig::default()
    };
    let mut bad = Vec::new();
    let mut runs = 0;
    for task in TaskKind::ALL {
        let spec = exp.task_spec(task).map_err(err)?;
        for k in [0, 2, l - 1] {
            let out = finetune(&spec, &exp.vocab, &base, Some(k), &cfg, ctx.exec).map_err(err)?;
            let tuned = &out.models[0];
            let r = &out.report;
            let closed = param_count(&base.config, Some(k), !task.uses_lm_head()).map_err(err)?.trainable + tuned.head_numel();
            let flagged = tuned.set.trainable_numel();
            let steps = r.per_seed[0].steps;
            let frozen_same = groups_upto(&base, k) == groups_upto(tuned, k);
            let trained = groups_above(&base, k) != groups_above(tuned, k);
            if !(frozen_same && trained && steps == 100 && r.params_trainable == closed && flagged == closed) {
                bad.push(format!(
                    "{}/K={k}: frozen_same={frozen_same} trained={trained} steps={steps} trainable={} flagged={flagged} closed={closed}",
                    task.name(),
                    r.params_trainable
                ));
            }
            runs += 1;
        }
    }
    check(bad.is_empty(), format!("{runs} runs of 100 steps; violations: {bad:?}"))
}

fn c5_rsa(ctx: &mut Ctx) -> Outcome {
    let exp = Experiment::prepare(&ctx.config("rsa_exact")).map_err(err)?;
    let model = exp.random_model::<f32>().map_err(err)?;
    let sample = sample_snippets(&exp.corpus, 200, 0).map_err(err)?;
    let seqs = sample.encode(&exp.corpus, &exp.vocab, model.config.max_positions);
    let opts = |b: &str| RsaOptions {
        model_a: "base".into(),
        model_b: b.into(),
        pooling: exp.cfg.pooling,
        exec: ctx.exec,
    };

    let selfr = rsa_compare(&model, &model, &sample, &seqs, &opts("base")).map_err(err)?.rhos();
    let self_dev = selfr.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);

    let reps = repr_layers(&model, &seqs, exp.cfg.pooling, ctx.exec).map_err(err)?;
    let mut rng = RngStream::new(0).derive("acceptance/rotation");
    let rotated: Vec<Vec<Vec<f64>>> = reps
        .iter()
        .map(|layer| rotate(&random_orthogonal(layer[0].len(), &mut rng), layer))
        .collect();
    let rot = compare_representations(&reps, &rotated, ctx.exec).map_err(err)?;
    let rot_dev = rot.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);

    let k = 2;
    let spec = exp.task_spec(TaskKind::Search).map_err(err)?;
    let cfg = FinetuneConfig {
        lr: 1e-3,
        batch_size: 16,
        max_epochs: 1000,
        patience: 1000,
        seeds: vec![0],
        max_steps: Some(20),
        ..FinetuneConfig::default()
    };
    let a = finetune(&spec, &exp.vocab, &model, Some(k), &cfg, ctx.exec).map_err(err)?.models.remove(0);
    let b = finetune(&spec, &exp.vocab, &model, Some(k), &cfg, ctx.exec).map_err(err)?.models.remove(0);
    let deterministic = a.set.checksum_where(|_| true) == b.set.checksum_where(|_| true);
    let tuned = rsa_compare(&model, &a, &sample, &seqs, &opts("telly-2")).map_err(err)?.rhos();
    let frozen_exact = tuned[..=k].iter().all(|&r| r == 1.0);

    check(
        self_dev <= 1e-9 && rot_dev <= 1e-6 && deterministic && frozen_exact,
        format!(
            "N=200 self max|rho-1|={self_dev:.1e}, rotated max|rho-1|={rot_dev:.1e}, \
             telly-{k} deterministic={deterministic} rho={tuned:.6?}"
        ),
    )
}

const PROBE_MARGIN: f64 = 5.0;

fn c6_probes(ctx: &mut Ctx) -> Outcome {
    let ckpt = ctx.checkpoint()?;
    let cfg = ctx.config("probe");
    let s = cmd_probe::<f32>(&cfg, &ProbeTask::ALL, &ckpt, None, ctx.exec).map_err(err)?;
    let rows: Vec<String> = s
        .rows
        .iter()
        .map(|r| format!("{} {:.2} vs {:.2} ({:+.2})", r.task.name(), r.pretrained, r.random, r.margin))
        .collect();
    check(
        s.rows.len() == 4 && s.rows.iter().all(|r| r.margin >= PROBE_MARGIN),
        format!("pretrained vs random, seeds {:?}: {}", cfg.seeds, rows.join("; ")),
    )
}

/// Fine-tuning schedule shared by the RSA-trend and sweep criteria.
fn search_config(ctx: &Ctx, sub: &str, seeds: Vec<u64>) -> ExperimentConfig {
    let mut cfg = ctx.config(sub);
    cfg.task = TaskKind::Search;
    cfg.seeds = seeds;
    cfg.finetune.lr = 1e-3;
    cfg.finetune.batch_size = 16;
    cfg.finetune.max_epochs = 10;
    cfg.finetune.patience = 3;
    cfg
}

fn c7_rsa_trend(ctx: &mut Ctx) -> Outcome {
    let ckpt = ctx.checkpoint()?;
    let mut cfg = search_config(ctx, "rsa_trend", vec![0]);
    cfg.freeze = None;
    let report = cmd_finetune::<f32>(&cfg, &ckpt, ctx.exec).map_err(err)?;
    let tuned = cfg.out.join("finetuned.ckpt");
    let rsa = cmd_rsa::<f32>(&cfg, &ckpt, &tuned, ctx.exec).map_err(err)?;
    let rho = rsa.rhos();
    let l = rho.len() - 1;
    let bottom = &rho[1..=l / 2];
    let mean_bottom = bottom.iter().sum::<f64>() / bottom.len() as f64;
    check(
        mean_bottom > rho[l],
        format!(
            "search MRR {:.3}; rho per layer {rho:.3?}; mean over layers 1..={} {mean_bottom:.3} vs layer {l} {:.3}",
            report.metrics.get("mrr").copied().unwrap_or(f64::NAN),
            l / 2,
            rho[l]
        ),
    )
}

const TIME_NOISE: f64 = 0.10;
const MRR_BAND: f64 = 0.05;

fn c9_sweep(ctx: &mut Ctx) -> Outcome {
    let ckpt = ctx.checkpoint()?;
    let cfg = search_config(ctx, "sweep", vec![0, 1, 2]);
    let l = cfg.layers;
    let ks: Vec<usize> = (0..l).collect();
    let t = cmd_sweep::<f32>(&cfg, &ckpt, &ks, ctx.exec).map_err(err)?;
    if !t.failures.is_empty() {
        return Err(format!("failed runs: {:?}", t.failures));
    }
    let params: Vec<u64> = t.rows.iter().map(|r| r.params_trainable).collect();
    let secs: Vec<f64> = t.rows.iter().map(|r| r.epoch_seconds).collect();
    let mrr: Vec<f64> = t.rows.iter().map(|r| r.metrics["mrr"]).collect();
    let params_ok = params.windows(2).all(|w| w[1] < w[0]);
    let time_ok = secs.windows(2).all(|w| w[1] <= w[0] * (1.0 + TIME_NOISE));
    let mut mrr_ok = true;
    for (r, m) in t.rows.iter().zip(&mrr) {
        if r.k.is_some_and(|k| k <= l / 2) {
            mrr_ok &= ((m - mrr[0]) / mrr[0]).abs() <= MRR_BAND;
        }
    }
    check(
        params_ok && time_ok && mrr_ok,
        format!(
            "rows base,K=0..{}: trainable {params:?} (strictly decreasing {params_ok}); \
             epoch s {secs:.2?} (non-increasing within 10% {time_ok}); MRR {mrr:.3?} (K<={} within 5% {mrr_ok})",
            l - 1,
            l / 2
        ),
    )
}

fn c8_metrics(_: &mut Ctx) -> Outcome {
    let counts = [
        ("ranking", metricsuite::ranking()),
        ("prf", metricsuite::precision_recall_f1()),
        ("map", metricsuite::mean_average_precision_pairwise()),
        ("edit/em", metricsuite::edit_similarity_and_exact_match()),
    ];
    let examples = metricsuite::worked_examples();
    let examples_ok = examples.iter().all(|(got, want)| (got - want).abs() < 1e-9);
    check(
        counts.iter().all(|c| c.1 == 0) && examples_ok,
        format!(
            "mismatches over {} instances each {counts:?}; worked examples {:.4?}",
            metricsuite::INSTANCES,
            examples.map(|e| e.0)
        ),
    )
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget_s: f64,
    run: fn(&mut Ctx) -> Outcome,
}

const CRITERIA: [Criterion; 9] = [
    Criterion { id: 1, name: "parameter accounting", budget_s: 1.0, run: c1_params },
    Criterion { id: 2, name: "cyclomatic complexity", budget_s: 5.0, run: c2_cyclomatic },
    Criterion { id: 3, name: "gradient correctness", budget_s: 120.0, run: c3_gradients },
    Criterion { id: 4, name: "freezing invariant", budget_s: 300.0, run: c4_freezing },
    Criterion { id: 5, name: "RSA exactness and invariance", budget_s: 180.0, run: c5_rsa },
    Criterion { id: 6, name: "directional probing", budget_s: 900.0, run: c6_probes },
    Criterion { id: 7, name: "directional RSA", budget_s: 600.0, run: c7_rsa_trend },
    Criterion { id: 8, name: "metric oracles", budget_s: 60.0, run: c8_metrics },
    Criterion { id: 9, name: "sweep efficiency trend", budget_s: 1800.0, run: c9_sweep },
];

fn main() {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let out = std::env::var_os("ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    let checkpoint = std::env::var_os("ACCEPTANCE_CHECKPOINT").map(PathBuf::from);
    let mut ctx = Ctx { out, exec: Exec::default(), checkpoint };
    println!("acceptance artifacts in {}", ctx.out.display());
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| picked.is_empty() || picked.contains(&c.id)) {
        let t = Instant::now();
        let res = (c.run)(&mut ctx);
        let secs = t.elapsed().as_secs_f64();
        let in_budget = secs <= c.budget_s;
        let (ok, detail) = match res {
            Ok(d) => (in_budget, d),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {}: {} {} ({secs:.2}s, budget {}s{}) {detail}",
            c.id,
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.budget_s,
            if in_budget { "" } else { ", over budget" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
