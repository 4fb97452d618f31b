//! Experiment configuration: a plain `key = value` file, overridden by flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use codelayers::finetune::{FinetuneConfig, TaskKind};
use codelayers::model::{ModelConfig, PretrainConfig};
use codelayers::numcore::Precision;
use codelayers::probes::ProbeConfig;
use codelayers::report::config_hash;
use codelayers::rsa::Pooling;

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "CODELAYERS_OUT";

/// Documented keys with their meaning.
pub const KEYS: &[(&str, &str)] = &[
    ("corpus", "\"toy\" for the generated corpus, or a JSONL file of {id, code, doc, lang} records"),
    ("corpus_seed", "generator seed of the toy corpus"),
    ("corpus_size", "number of toy functions"),
    ("vocab_min_count", "minimum token frequency for the vocabulary"),
    ("layers", "encoder layers L"),
    ("hidden", "hidden width d"),
    ("ffn", "feed-forward width"),
    ("heads", "attention heads"),
    ("max_positions", "longest sequence, special tokens included"),
    ("seed", "model initialisation and pretraining seed"),
    ("seeds", "comma-separated probe and fine-tuning seeds"),
    ("precision", "32 or 64"),
    ("out", "output directory"),
    ("rsa_n", "snippets sampled for RSA"),
    ("pooling", "all_tokens or exclude_specials"),
    ("pretrain_steps", "masked-LM optimizer steps"),
    ("pretrain_batch", "masked-LM batch size"),
    ("pretrain_lr", "masked-LM learning rate"),
    ("mask_prob", "masking probability"),
    ("probe_lr", "probe learning rate"),
    ("probe_batch", "probe batch size"),
    ("probe_epochs", "probe epoch limit"),
    ("probe_patience", "probe early-stopping patience"),
    ("probe_standardize", "z-score probe features with training statistics (true/false)"),
    ("task", "search, clone or completion"),
    ("ft_lr", "fine-tuning learning rate"),
    ("ft_batch", "fine-tuning batch size"),
    ("ft_epochs", "fine-tuning epoch limit"),
    ("ft_patience", "fine-tuning early-stopping patience"),
    ("ft_max_train", "cap on training examples (0 = all)"),
    ("ft_max_steps", "cap on optimizer steps per run (0 = none)"),
    ("freeze", "K for Telly-K, or \"none\" for full fine-tuning"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CorpusSource {
    Toy { seed: u64, size: usize },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub vocab_min_count: usize,
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    /// Not part of the hash: where results go does not change them.
    #[serde(skip)]
    pub out: PathBuf,
    pub rsa_n: usize,
    pub pooling: Pooling,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub task: TaskKind,
    pub finetune: FinetuneConfig,
    pub ft_max_train: Option<usize>,
    pub freeze: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk(0);
        ExperimentConfig {
            corpus: CorpusSource::Toy { seed: 0, size: 1000 },
            vocab_min_count: 2,
            layers: desk.num_layers,
            hidden: desk.hidden_dim,
            ffn: desk.ffn_dim,
            heads: desk.num_heads,
            max_positions: desk.max_positions,
            seed: 0,
            seeds: vec![0, 1, 2],
            precision: Precision::F32,
            out: PathBuf::from("out"),
            rsa_n: 500,
            pooling: Pooling::AllTokens,
            pretrain: PretrainConfig { steps: 2000, ..Default::default() },
            probe: ProbeConfig::default(),
            task: TaskKind::Search,
            finetune: FinetuneConfig { lr: 1e-3, ..Default::default() },
            ft_max_train: None,
            freeze: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("{key}: expected true or false, got {v:?}"),
    }
}

/// `0` means "no cap".
fn cap(key: &str, v: &str) -> Result<Option<usize>> {
    let n: usize = num(key, v)?;
    Ok((n > 0).then_some(n))
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        if let Ok(out) = std::env::var(OUT_ENV) {
            c.out = PathBuf::from(out);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for (k, v) in parse_kv(&text)? {
                c.set(&k, &v).with_context(|| format!("{}", path.display()))?;
            }
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "corpus" => {
                self.corpus = match (v, &self.corpus) {
                    ("toy", CorpusSource::Toy { .. }) => return Ok(()),
                    ("toy", _) => CorpusSource::Toy { seed: 0, size: 1000 },
                    _ => CorpusSource::File(PathBuf::from(v)),
                }
            }
            "corpus_seed" | "corpus_size" => {
                let CorpusSource::Toy { seed, size } = &mut self.corpus else {
                    bail!("{key} only applies to corpus = toy");
                };
                if key == "corpus_seed" {
                    *seed = num(key, v)?;
                } else {
                    *size = num(key, v)?;
                }
            }
            "vocab_min_count" => self.vocab_min_count = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "ffn" => self.ffn = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "max_positions" => self.max_positions = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "seeds" => {
                self.seeds = v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?;
            }
            "precision" => {
                self.precision = match v {
                    "32" => Precision::F32,
                    "64" => Precision::F64,
                    _ => bail!("precision: expected 32 or 64, got {v:?}"),
                }
            }
            "out" => self.out = PathBuf::from(v),
            "rsa_n" => self.rsa_n = num(key, v)?,
            "pooling" => {
                self.pooling = match v {
                    "all_tokens" => Pooling::AllTokens,
                    "exclude_specials" => Pooling::ExcludeSpecials,
                    _ => bail!("pooling: expected all_tokens or exclude_specials, got {v:?}"),
                }
            }
            "pretrain_steps" => self.pretrain.steps = num(key, v)?,
            "pretrain_batch" => self.pretrain.batch_size = num(key, v)?,
            "pretrain_lr" => self.pretrain.lr = num(key, v)?,
            "mask_prob" => self.pretrain.mask_prob = num(key, v)?,
            "probe_lr" => self.probe.lr = num(key, v)?,
            "probe_batch" => self.probe.batch_size = num(key, v)?,
            "probe_epochs" => self.probe.max_epochs = num(key, v)?,
            "probe_patience" => self.probe.patience = num(key, v)?,
            "probe_standardize" => self.probe.standardize = flag(key, v)?,
            "task" => self.task = v.parse().map_err(|e: String| anyhow!(e))?,
            "ft_lr" => self.finetune.lr = num(key, v)?,
            "ft_batch" => self.finetune.batch_size = num(key, v)?,
            "ft_epochs" => self.finetune.max_epochs = num(key, v)?,
            "ft_patience" => self.finetune.patience = num(key, v)?,
            "ft_max_train" => self.ft_max_train = cap(key, v)?,
            "ft_max_steps" => self.finetune.max_steps = cap(key, v)?,
            "freeze" => self.freeze = if v == "none" { None } else { Some(num(key, v)?) },
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            bail!("hidden ({}) must be a positive multiple of heads ({})", self.hidden, self.heads);
        }
        if self.max_positions < 3 {
            bail!("max_positions must leave room for [CLS], one token and [SEP]");
        }
        if let Some(k) = self.freeze {
            if k > self.layers {
                bail!("freeze K={k} is outside 0..={}", self.layers);
            }
        }
        if !(0.0..1.0).contains(&self.pretrain.mask_prob) {
            bail!("mask_prob must be in [0, 1)");
        }
        if self.rsa_n < 3 {
            bail!("rsa_n must be at least 3");
        }
        if let CorpusSource::Toy { size: 0, .. } = self.corpus {
            bail!("corpus_size must be positive");
        }
        Ok(())
    }

    /// Model shape for a vocabulary size.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.layers,
            hidden_dim: self.hidden,
            ffn_dim: self.ffn,
            num_heads: self.heads,
            max_positions: self.max_positions,
            ..ModelConfig::desk(vocab_size)
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig { seeds: self.seeds.clone(), ..self.probe.clone() }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig { seeds: self.seeds.clone(), ..self.finetune.clone() }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// The configuration back in file form; `load` of this text reproduces it.
    pub fn to_kv(&self) -> String {
        let mut m = BTreeMap::new();
        match &self.corpus {
            CorpusSource::Toy { seed, size } => {
                m.insert("corpus", "toy".to_string());
                m.insert("corpus_seed", seed.to_string());
                m.insert("corpus_size", size.to_string());
            }
            CorpusSource::File(p) => {
                m.insert("corpus", p.display().to_string());
            }
        }
        let opt = |o: Option<usize>| o.map_or("0".to_string(), |n| n.to_string());
        m.insert("vocab_min_count", self.vocab_min_count.to_string());
        m.insert("layers", self.layers.to_string());
        m.insert("hidden", self.hidden.to_string());
        m.insert("ffn", self.ffn.to_string());
        m.insert("heads", self.heads.to_string());
        m.insert("max_positions", self.max_positions.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("seeds", self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        m.insert("precision", self.precision.bits().to_string());
        m.insert("out", self.out.display().to_string());
        m.insert("rsa_n", self.rsa_n.to_string());
        m.insert(
            "pooling",
            match self.pooling {
                Pooling::AllTokens => "all_tokens",
                Pooling::ExcludeSpecials => "exclude_specials",
            }
            .to_string(),
        );
        m.insert("pretrain_steps", self.pretrain.steps.to_string());
        m.insert("pretrain_batch", self.pretrain.batch_size.to_string());
        m.insert("pretrain_lr", self.pretrain.lr.to_string());
        m.insert("mask_prob", self.pretrain.mask_prob.to_string());
        m.insert("probe_lr", self.probe.lr.to_string());
        m.insert("probe_batch", self.probe.batch_size.to_string());
        m.insert("probe_epochs", self.probe.max_epochs.to_string());
        m.insert("probe_patience", self.probe.patience.to_string());
        m.insert("probe_standardize", self.probe.standardize.to_string());
        m.insert("task", self.task.name().to_string());
        m.insert("ft_lr", self.finetune.lr.to_string());
        m.insert("ft_batch", self.finetune.batch_size.to_string());
        m.insert("ft_epochs", self.finetune.max_epochs.to_string());
        m.insert("ft_patience", self.finetune.patience.to_string());
        m.insert("ft_max_train", opt(self.ft_max_train));
        m.insert("ft_max_steps", opt(self.finetune.max_steps));
        m.insert("freeze", self.freeze.map_or("none".to_string(), |k| k.to_string()));
        m.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.conf");
        std::fs::write(&path, "# desk run\nlayers = 2\nseeds = 3, 4\nprecision = 64\n\nft_lr=0.01\n").unwrap();
        let c = ExperimentConfig::load(Some(&path), &[("layers".into(), "3".into())]).unwrap();
        assert_eq!(c.layers, 3);
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.precision, Precision::F64);
        assert_eq!(c.finetune_config().seeds, vec![3, 4]);
        assert_eq!(c.finetune.lr, 0.01);
    }

    #[test]
    fn kv_round_trip_preserves_hash() {
        let mut c = ExperimentConfig::default();
        c.set("freeze", "2").unwrap();
        c.set("corpus_size", "77").unwrap();
        c.set("probe_standardize", "true").unwrap();
        let overrides = parse_kv(&c.to_kv()).unwrap();
        let d = ExperimentConfig::load(None, &overrides).unwrap();
        assert_eq!(c, d);
        assert_eq!(c.hash(), d.hash());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 9;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = ExperimentConfig::default();
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("precision", "16").is_err());
        assert!(c.set("layers", "x").is_err());
        assert!(parse_kv("just words").is_err());
        let bad = [("freeze".to_string(), "9".to_string())];
        assert!(ExperimentConfig::load(None, &bad).is_err());
        let bad = [("heads".to_string(), "5".to_string())];
        assert!(ExperimentConfig::load(None, &bad).is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let c = ExperimentConfig::default();
        let kv: Vec<String> = parse_kv(&c.to_kv()).unwrap().into_iter().map(|(k, _)| k).collect();
        for (k, _) in KEYS {
            assert!(kv.iter().any(|x| x == k), "{k} missing from to_kv");
        }
        assert_eq!(kv.len(), KEYS.len());
    }
}
