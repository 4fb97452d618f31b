use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use super::{CorpusError, CorpusRecord};
use crate::codeprops::{ast_only, lex_classify, parse, serialize_ast};

pub const VOCAB_VERSION: &str = "codelayers-vocab 1";

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const NEWLINE: &str = "[NEWLINE]";
pub const SPECIALS: [&str; 6] = [PAD, UNK, CLS, SEP, MASK, NEWLINE];

/// Word-level vocabulary. Specials take ids 0..6; remaining tokens are
/// ordered by descending count, then lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Token ids plus the id position of each lexer token, so per-token probes
/// can align representation rows with lexical labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub lex_positions: Vec<usize>,
}

/// Lexer token texts per line; falls back to whitespace splitting when the
/// text does not lex (prose with apostrophes, for instance).
fn lines_of(text: &str) -> Vec<Vec<String>> {
    let mut lines: Vec<Vec<String>> = Vec::new();
    match lex_classify(text) {
        Ok(toks) => {
            let mut cursor = 0usize;
            let mut current = Vec::new();
            for t in toks {
                let breaks = text[cursor..t.span.0].matches('\n').count();
                if breaks > 0 && !current.is_empty() {
                    lines.push(std::mem::take(&mut current));
                }
                current.push(t.text);
                cursor = t.span.1;
            }
            if !current.is_empty() {
                lines.push(current);
            }
        }
        Err(_) => {
            for l in text.lines() {
                let words: Vec<String> = l.split_whitespace().map(str::to_string).collect();
                if !words.is_empty() {
                    lines.push(words);
                }
            }
        }
    }
    lines
}

/// Whether the final line is terminated by a newline in the source.
fn ends_with_newline(text: &str) -> bool {
    text.trim_end_matches([' ', '\t', '\r']).ends_with('\n')
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(CorpusError::VocabFormat(format!("special {s} must have id {i}")));
            }
        }
        let index: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        if index.len() != tokens.len() {
            return Err(CorpusError::VocabFormat("duplicate token".into()));
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Builds from code, doc strings and AST-only serializations of the
    /// corpus. Tokens seen fewer than `min_count` times map to UNK.
    pub fn build(corpus: &[CorpusRecord], min_count: usize) -> Result<Self, CorpusError> {
        if corpus.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut bump = |t: String| *counts.entry(t).or_insert(0) += 1;
        for r in corpus {
            for line in lines_of(&r.code).into_iter().chain(lines_of(&r.doc)) {
                line.into_iter().for_each(&mut bump);
            }
            if let Ok(ast) = parse(&r.code) {
                serialize_ast(&ast_only(&ast)).into_iter().for_each(&mut bump);
            }
        }
        let mut rest: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(&t.as_str()))
            .collect();
        rest.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(rest.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(1)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> u32 {
        0
    }
    pub fn unk(&self) -> u32 {
        1
    }
    pub fn cls(&self) -> u32 {
        2
    }
    pub fn sep(&self) -> u32 {
        3
    }
    pub fn mask(&self) -> u32 {
        4
    }
    pub fn newline(&self) -> u32 {
        5
    }

    /// Encodes text; line breaks between tokens become one NEWLINE each, and
    /// a trailing line break is kept.
    pub fn encode_aligned(&self, text: &str) -> Encoded {
        let lines = lines_of(text);
        let n = lines.len();
        let mut ids = Vec::new();
        let mut lex_positions = Vec::new();
        for (li, line) in lines.into_iter().enumerate() {
            for t in line {
                lex_positions.push(ids.len());
                ids.push(self.id(&t));
            }
            if li + 1 < n || ends_with_newline(text) {
                ids.push(self.newline());
            }
        }
        Encoded { ids, lex_positions }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_aligned(text).ids
    }

    /// Encodes a token list (already split, for instance an AST-only
    /// serialization).
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Joins tokens with single spaces; NEWLINE becomes a line break.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            if id == self.newline() {
                out.push('\n');
                line_start = true;
                continue;
            }
            if !line_start {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or(UNK));
            line_start = false;
        }
        out
    }

    /// `[CLS] ids [SEP]`.
    pub fn wrap(&self, ids: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(ids.len() + 2);
        out.push(self.cls());
        out.extend_from_slice(ids);
        out.push(self.sep());
        out
    }

    /// [`wrap`](Self::wrap) after keeping the first `max_len - 2` ids, so the
    /// result fits `max_len` positions.
    pub fn wrap_truncated(&self, ids: &[u32], max_len: usize) -> Vec<u32> {
        let keep = ids.len().min(max_len.saturating_sub(2));
        self.wrap(&ids[..keep])
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut text = String::from(VOCAB_VERSION);
        text.push('\n');
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_VERSION) {
            return Err(CorpusError::VocabFormat(format!("missing header {VOCAB_VERSION:?}")));
        }
        Self::from_tokens(lines.map(str::to_string).collect())
    }

    /// Canonical text: tokens of each line joined by one space, lines by a
    /// line break. `decode(encode(x)) == canonical(x)` whenever every token
    /// of `x` is in the vocabulary.
    pub fn canonical(text: &str) -> String {
        let lines = lines_of(text);
        let mut out = lines.iter().map(|l| l.join(" ")).collect::<Vec<_>>().join("\n");
        if !lines.is_empty() && ends_with_newline(text) {
            out.push('\n');
        }
        out
    }
}
