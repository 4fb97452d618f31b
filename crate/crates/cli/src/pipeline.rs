//! Shared experiment plumbing: corpus, vocabulary, datasets and models.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use codelayers::codeprops::{ast_only, parse, serialize_ast};
use codelayers::corpus::{generate_toy_corpus, read_jsonl, CorpusRecord, Vocabulary};
use codelayers::finetune::{build_clone_data, build_completion_data, build_search_data, TaskData, TaskKind, TaskSpec};
use codelayers::model::{load_checkpoint, EncoderParams, ModelConfig};
use codelayers::numcore::{RngStream, Scalar};
use codelayers::probes::{
    build_lexical_dataset, build_semantic_dataset, build_structural_dataset, build_syntactic_dataset, ProbeDataset,
    ProbeTask, SemanticConfig,
};

use crate::config::{CorpusSource, ExperimentConfig};

pub const VOCAB_FILE: &str = "vocab.txt";

pub fn load_corpus(source: &CorpusSource) -> Result<Vec<CorpusRecord>> {
    let records = match source {
        CorpusSource::Toy { seed, size } => generate_toy_corpus(*seed, *size),
        CorpusSource::File(path) => {
            let read = read_jsonl(path)?;
            if read.skipped > 0 {
                log::warn!("{}: skipped {} malformed records", path.display(), read.skipped);
            }
            read.records
        }
    };
    if records.is_empty() {
        bail!("corpus is empty");
    }
    Ok(records)
}

/// Corpus plus vocabulary, the inputs every command starts from.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub corpus: Vec<CorpusRecord>,
    pub vocab: Vocabulary,
}

impl Experiment {
    /// Builds the vocabulary from the corpus.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        let corpus = load_corpus(&cfg.corpus)?;
        let vocab = Vocabulary::build(&corpus, cfg.vocab_min_count)?;
        Ok(Experiment { cfg: cfg.clone(), corpus, vocab })
    }

    /// Uses the vocabulary saved next to `checkpoint` when there is one.
    pub fn for_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Self> {
        let mut e = Experiment::prepare(cfg)?;
        let saved = vocab_path(checkpoint);
        if saved.exists() {
            e.vocab = Vocabulary::load(&saved).with_context(|| format!("loading {}", saved.display()))?;
        }
        Ok(e)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.cfg.model_config(self.vocab.len())
    }

    pub fn max_len(&self) -> usize {
        self.cfg.max_positions
    }

    /// Masked-LM inputs: every function as code and as its AST-Only
    /// serialisation, plus every non-empty description on its own.
    pub fn pretrain_sequences(&self) -> Vec<Vec<u32>> {
        let ml = self.max_len();
        let mut seqs: Vec<Vec<u32>> =
            self.corpus.iter().map(|r| self.vocab.wrap_truncated(&self.vocab.encode(&r.code), ml)).collect();
        for r in self.corpus.iter().filter(|r| !r.doc.trim().is_empty()) {
            seqs.push(self.vocab.wrap_truncated(&self.vocab.encode(&r.doc), ml));
        }
        for r in &self.corpus {
            if let Ok(ast) = parse(&r.code) {
                let tokens = serialize_ast(&ast_only(&ast));
                seqs.push(self.vocab.wrap_truncated(&self.vocab.encode_tokens(&tokens), ml));
            }
        }
        seqs
    }

    fn data_rng(&self) -> RngStream {
        RngStream::new(self.cfg.seed).derive("data")
    }

    pub fn probe_dataset(&self, task: ProbeTask) -> Result<ProbeDataset> {
        let ml = self.max_len();
        let rng = self.data_rng().derive(task.name());
        Ok(match task {
            ProbeTask::Lexical => build_lexical_dataset(&self.corpus, &self.vocab, ml),
            ProbeTask::Syntactic => build_syntactic_dataset(&self.corpus, &self.vocab, ml, &rng)?,
            ProbeTask::Semantic => build_semantic_dataset(&SemanticConfig::default(), &self.vocab, ml, &rng)?,
            ProbeTask::Structural => build_structural_dataset(&self.corpus, &self.vocab, ml),
        })
    }

    pub fn task_spec(&self, kind: TaskKind) -> Result<TaskSpec> {
        let ml = self.max_len();
        let rng = self.data_rng().derive(kind.name());
        let mut data = match kind {
            TaskKind::Search => TaskData::Search(build_search_data(&self.corpus, &self.vocab, ml)),
            TaskKind::Clone => TaskData::Clone(build_clone_data(&self.corpus, &self.vocab, ml, &rng)?),
            TaskKind::Completion => TaskData::Completion(build_completion_data(&self.corpus, &self.vocab, &rng)),
        };
        if let Some(n) = self.cfg.ft_max_train {
            data.limit_train(n);
        }
        Ok(TaskSpec::new(data))
    }

    /// Freshly initialised encoder with the configured seed.
    pub fn random_model<T: Scalar>(&self) -> Result<EncoderParams<T>> {
        Ok(EncoderParams::init(&self.model_config(), &RngStream::new(self.cfg.seed))?)
    }

    /// Loads a checkpoint and checks it against the vocabulary.
    pub fn load_model<T: Scalar>(&self, path: &Path) -> Result<EncoderParams<T>> {
        let p: EncoderParams<T> = load_checkpoint(path, None).with_context(|| format!("loading {}", path.display()))?;
        if p.config.vocab_size != self.vocab.len() {
            bail!(
                "{}: vocabulary has {} tokens but the checkpoint expects {}",
                path.display(),
                self.vocab.len(),
                p.config.vocab_size
            );
        }
        Ok(p)
    }
}

/// `vocab.txt` in the checkpoint's directory.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE)
}
