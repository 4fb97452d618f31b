use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};

use codelayers::model::ModelConfig;
use codelayers::par::Exec;
use codelayers::probes::ProbeTask;
use codelayers_cli::commands::*;
use codelayers_cli::config::{ExperimentConfig, KEYS, OUT_ENV};
use codelayers_cli::with_precision;

#[derive(Parser)]
#[command(name = "codelayers", version, about = "Probing, RSA and layer-freezing fine-tuning of small code encoders")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. --set pretrain_steps=200
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory [env: CODELAYERS_OUT]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// 32 or 64
    #[arg(long, global = true)]
    precision: Option<String>,
    /// K, "none", or a range a..b (sweep)
    #[arg(long, global = true)]
    freeze: Option<String>,
    #[arg(long = "rsa-n", global = true)]
    rsa_n: Option<usize>,
    /// Run every data-parallel loop on the calling thread
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Masked-LM pretraining; writes pretrained.ckpt, vocab.txt, loss_curve.csv
    Pretrain,
    /// Probe random, pretrained and optionally fine-tuned representations
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        finetuned: Option<PathBuf>,
        /// lexical, syntactic, semantic, structural or all
        #[arg(long, default_value = "all")]
        task: String,
    },
    /// Layer-wise RSA between two checkpoints
    Rsa {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Fine-tune one model (full, or Telly-K with --freeze K)
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Option<String>,
    },
    /// Base run plus Telly-K for every K in --freeze (default 0..L-1)
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Option<String>,
    },
    /// Closed-form parameter accounting
    Params {
        /// desk (configured shape) or paper (12 x 768 x 3072)
        #[arg(long, default_value = "desk")]
        scale: String,
        /// Vocabulary size of the desk shape
        #[arg(long, default_value_t = 1056)]
        vocab: usize,
    },
    /// Layer contributions of the probe reports in the output directory
    Analyze,
    /// Markdown digest of the output directory
    Report,
    /// List configuration keys
    Keys,
}

/// `K`, `none`, or `a..b` (inclusive of both ends).
fn parse_freeze(s: &str) -> Result<Vec<Option<usize>>> {
    if s == "none" {
        return Ok(vec![None]);
    }
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.parse()?;
        let b: usize = b.parse()?;
        if a > b {
            bail!("empty freeze range {s}");
        }
        return Ok((a..=b).map(Some).collect());
    }
    Ok(vec![Some(s.parse()?)])
}

fn build_config(g: &Global, task: Option<&str>) -> Result<(ExperimentConfig, Option<Vec<Option<usize>>>)> {
    let mut overrides = Vec::new();
    for kv in &g.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv}"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    push("out", g.out.as_ref().map(|p| p.display().to_string()));
    push("seed", g.seed.map(|s| s.to_string()));
    push("precision", g.precision.clone());
    push("rsa_n", g.rsa_n.map(|n| n.to_string()));
    push("task", task.map(str::to_string));
    let freeze = g.freeze.as_deref().map(parse_freeze).transpose()?;
    if let Some([k]) = freeze.as_deref() {
        push("freeze", Some(k.map_or("none".to_string(), |k| k.to_string())));
    }
    let cfg = ExperimentConfig::load(g.config.as_deref(), &overrides)?;
    Ok((cfg, freeze))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let exec = if cli.global.sequential { Exec::Sequential } else { Exec::default() };
    let task = match &cli.cmd {
        Cmd::Finetune { task, .. } | Cmd::Sweep { task, .. } => task.as_deref(),
        _ => None,
    };
    let (cfg, freeze) = build_config(&cli.global, task)?;
    log::info!("config hash {} -> {}", cfg.hash(), cfg.out.display());
    match cli.cmd {
        Cmd::Pretrain => {
            let s = with_precision!(cfg.precision, T => cmd_pretrain::<T>(&cfg, exec))?;
            println!(
                "pretrained {} steps: loss {:.4} -> {:.4}; smoothed curve decreasing: {}; checkpoint {} ({})",
                s.steps,
                s.first_loss,
                s.final_loss,
                s.smoothed_decreasing,
                s.checkpoint.display(),
                s.checkpoint_sha256
            );
        }
        Cmd::Probe { checkpoint, finetuned, task } => {
            let tasks: Vec<ProbeTask> = if task == "all" {
                ProbeTask::ALL.to_vec()
            } else {
                vec![ProbeTask::ALL
                    .into_iter()
                    .find(|t| t.name() == task)
                    .ok_or_else(|| anyhow!("unknown probe task {task}"))?]
            };
            let s = with_precision!(cfg.precision, T => cmd_probe::<T>(&cfg, &tasks, &checkpoint, finetuned.as_deref(), exec))?;
            println!("{:<11} {:>8} {:>10} {:>10} {:>8}  random<pretrained", "task", "random", "pretrained", "finetuned", "margin");
            for r in &s.rows {
                let f = r.finetuned.map_or("-".to_string(), |v| format!("{v:.2}"));
                println!("{:<11} {:>8.2} {:>10.2} {:>10} {:>8.2}  {}", r.task.name(), r.random, r.pretrained, f, r.margin, r.direction);
            }
        }
        Cmd::Rsa { a, b } => {
            let r = with_precision!(cfg.precision, T => cmd_rsa::<T>(&cfg, &a, &b, exec))?;
            println!("layer  rho            band");
            for l in &r.layers {
                println!("{:<6} {:<14.10} {}", l.l, l.rho, l.band.label());
            }
        }
        Cmd::Finetune { checkpoint, .. } => {
            if freeze.as_ref().is_some_and(|f| f.len() != 1) {
                bail!("finetune takes a single --freeze K; use sweep for a range");
            }
            let r = with_precision!(cfg.precision, T => cmd_finetune::<T>(&cfg, &checkpoint, exec))?;
            println!(
                "{} {}: trainable {} ({:.2}% reduction), epoch {:.3}s, convergence {:.3}s, {:?}",
                r.model,
                r.task.name(),
                r.params_trainable,
                r.params_reduction_pct,
                r.epoch_seconds,
                r.convergence_seconds,
                r.metrics
            );
        }
        Cmd::Sweep { checkpoint, .. } => {
            let ks: Vec<usize> = match freeze {
                Some(f) => f.into_iter().flatten().collect(),
                None => (0..cfg.layers).collect(),
            };
            let t = with_precision!(cfg.precision, T => cmd_sweep::<T>(&cfg, &checkpoint, &ks, exec))?;
            for r in &t.rows {
                println!(
                    "{:<8} trainable {:>9} ({:>6.2}%) epoch {:.3}s {:?}",
                    r.model, r.params_trainable, r.params_reduction_pct, r.epoch_seconds, r.metrics
                );
            }
            for f in &t.failures {
                eprintln!("{} failed: {}", f.model, f.error);
            }
            if t.has_frozen_drift() {
                eprintln!("frozen parameters drifted; invariant violated");
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Params { scale, vocab } => {
            let config = match scale.as_str() {
                "paper" => ModelConfig::paper_scale(),
                "desk" => cfg.model_config(vocab),
                _ => bail!("unknown scale {scale}"),
            };
            let (_, text) = cmd_params(&cfg, &config)?;
            print!("{text}");
        }
        Cmd::Analyze => {
            let a = cmd_analyze(&cfg)?;
            for c in &a.contributions {
                let lam: Vec<String> = c.lambda.iter().map(|v| format!("{v:.3}")).collect();
                println!("{:<11} {:<11} argmax {}  λ [{}]", c.task.name(), format!("{:?}", c.source).to_lowercase(), c.argmax, lam.join(", "));
            }
            for o in &a.observations {
                println!("{o}");
            }
        }
        Cmd::Report => print!("{}", cmd_report(&cfg)?),
        Cmd::Keys => {
            println!("output root env var: {OUT_ENV}");
            for (k, d) in KEYS {
                println!("{k:<18} {d}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
