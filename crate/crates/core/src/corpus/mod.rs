//! Toy corpus generation, JSONL ingestion, the word-level vocabulary and
//! hash-based splits.

mod generator;
mod jsonl;
mod splits;
mod vocab;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use generator::{
    common_names, function_names, generate_function, generate_toy_corpus, generate_toy_corpus_with, problem_tags, GenConfig, GenMeta,
    GeneratedFunction,
};
pub use jsonl::{read_jsonl, write_jsonl, JsonlRead};
pub use splits::{make_splits, split_of, Split, SplitSpec, Splits};
pub use vocab::{Encoded, Vocabulary, SPECIALS, VOCAB_VERSION};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lexical error: {0}")]
    Lex(#[from] crate::codeprops::LexError),
    #[error("malformed vocabulary file: {0}")]
    VocabFormat(String),
    #[error("invalid split ratios: {0}")]
    Ratios(String),
    #[error("empty corpus")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub code: String,
    pub doc: String,
    pub lang: String,
    /// Generator ground truth; absent for ingested records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<GenMeta>,
}

/// Content hash of a (code, doc) pair, truncated to 16 hex digits.
pub fn content_id(code: &str, doc: &str) -> String {
    let mut h = Sha256::new();
    h.update(code.as_bytes());
    h.update([0u8]);
    h.update(doc.as_bytes());
    hex::encode(&h.finalize()[..8])
}

impl CorpusRecord {
    pub fn new(code: &str, doc: &str, lang: &str) -> Self {
        CorpusRecord {
            id: content_id(code, doc),
            code: code.to_string(),
            doc: doc.to_string(),
            lang: lang.to_string(),
            meta: None,
        }
    }

    pub fn generated(f: GeneratedFunction) -> Self {
        let mut r = CorpusRecord::new(&f.code, &f.doc, "minipy");
        r.meta = Some(f.meta);
        r
    }
}
