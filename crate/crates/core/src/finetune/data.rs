use serde::{Deserialize, Serialize};

use super::{FinetuneError, TaskKind};
use crate::codeprops::parse;
use crate::corpus::{split_of, CorpusRecord, Split, SplitSpec, Vocabulary};
use crate::numcore::RngStream;
use crate::probes::semantic_variant;

/// Code paired with its description; the description is the query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchData {
    pub code: Vec<Vec<u32>>,
    pub query: Vec<Vec<u32>>,
    pub split: Vec<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClonePair {
    pub a: usize,
    pub b: usize,
    pub label: bool,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloneData {
    pub seqs: Vec<Vec<u32>>,
    pub pairs: Vec<ClonePair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionExample {
    /// Preceding lines, each ended by NEWLINE; no `[CLS]`.
    pub context: Vec<u32>,
    /// The next line without its NEWLINE.
    pub target: Vec<u32>,
    pub split: Split,
}

impl CompletionExample {
    /// `[CLS] context target NEWLINE`, cut from the left of the context to
    /// fit `max_len`, with the rows whose next token is supervised and those
    /// tokens.
    pub fn training_ids(&self, cls: u32, newline: u32, max_len: usize) -> (Vec<u32>, Vec<usize>, Vec<usize>) {
        let tail = self.target.len() + 1;
        let room = max_len.saturating_sub(1 + tail);
        let ctx = &self.context[self.context.len().saturating_sub(room)..];
        let mut ids = Vec::with_capacity(1 + ctx.len() + tail);
        ids.push(cls);
        ids.extend_from_slice(ctx);
        let start = ids.len();
        ids.extend_from_slice(&self.target);
        ids.push(newline);
        let ids: Vec<u32> = ids.into_iter().take(max_len).collect();
        let rows: Vec<usize> = (start - 1..ids.len() - 1).collect();
        let targets = rows.iter().map(|&r| ids[r + 1] as usize).collect();
        (ids, rows, targets)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionData {
    pub examples: Vec<CompletionExample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskData {
    Search(SearchData),
    Clone(CloneData),
    Completion(CompletionData),
}

impl TaskData {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskData::Search(_) => TaskKind::Search,
            TaskData::Clone(_) => TaskKind::Clone,
            TaskData::Completion(_) => TaskKind::Completion,
        }
    }

    /// Example indices of a split.
    pub fn indices(&self, s: Split) -> Vec<usize> {
        let splits: Vec<Split> = match self {
            TaskData::Search(d) => d.split.clone(),
            TaskData::Clone(d) => d.pairs.iter().map(|p| p.split).collect(),
            TaskData::Completion(d) => d.examples.iter().map(|e| e.split).collect(),
        };
        (0..splits.len()).filter(|&i| splits[i] == s).collect()
    }

    /// Keeps at most `n` training examples (the first in index order).
    pub fn limit_train(&mut self, n: usize) {
        let keep: Vec<bool> = {
            let mut seen = 0;
            let splits: Vec<Split> = match self {
                TaskData::Search(d) => d.split.clone(),
                TaskData::Clone(d) => d.pairs.iter().map(|p| p.split).collect(),
                TaskData::Completion(d) => d.examples.iter().map(|e| e.split).collect(),
            };
            splits
                .into_iter()
                .map(|s| {
                    if s != Split::Train {
                        return true;
                    }
                    seen += 1;
                    seen <= n
                })
                .collect()
        };
        let mut it = keep.iter();
        match self {
            TaskData::Search(d) => {
                let mut k = keep.iter();
                d.code.retain(|_| *k.next().unwrap());
                let mut k = keep.iter();
                d.query.retain(|_| *k.next().unwrap());
                d.split.retain(|_| *it.next().unwrap());
            }
            TaskData::Clone(d) => d.pairs.retain(|_| *it.next().unwrap()),
            TaskData::Completion(d) => d.examples.retain(|_| *it.next().unwrap()),
        }
    }
}

/// One (code, description) pair per record.
pub fn build_search_data(corpus: &[CorpusRecord], vocab: &Vocabulary, max_len: usize) -> SearchData {
    let spec = SplitSpec::default();
    let mut d = SearchData { code: Vec::new(), query: Vec::new(), split: Vec::new() };
    for r in corpus.iter().filter(|r| !r.doc.trim().is_empty()) {
        d.code.push(vocab.wrap_truncated(&vocab.encode(&r.code), max_len));
        d.query.push(vocab.wrap_truncated(&vocab.encode(&r.doc), max_len));
        d.split.push(split_of(&r.id, &spec));
    }
    d
}

/// Balanced clone pairs. Each parseable record yields a positive (the record
/// and a renamed/restructured variant of itself) and a negative (the record
/// and a variant of a record from the same split with a different semantic
/// tag). Both partners are variants, so "was rewritten" carries no signal.
pub fn build_clone_data(
    corpus: &[CorpusRecord],
    vocab: &Vocabulary,
    max_len: usize,
    rng: &RngStream,
) -> Result<CloneData, FinetuneError> {
    let spec = SplitSpec::default();
    let parsed: Vec<(usize, crate::codeprops::AstNode, Split)> = corpus
        .iter()
        .enumerate()
        .filter_map(|(i, r)| parse(&r.code).ok().map(|a| (i, a, split_of(&r.id, &spec))))
        .collect();
    let tag = |i: usize| corpus[i].meta.as_ref().map(|m| m.tag.clone()).unwrap_or_default();
    let encode = |code: &str| vocab.wrap_truncated(&vocab.encode(code), max_len);
    let mut data = CloneData { seqs: Vec::new(), pairs: Vec::new() };
    for (i, ast, split) in &parsed {
        let mut r = rng.derive(&format!("clone/{}", corpus[*i].id));
        let others: Vec<usize> =
            (0..parsed.len()).filter(|&m| parsed[m].2 == *split && tag(parsed[m].0) != tag(*i)).collect();
        if others.is_empty() {
            continue;
        }
        let neg = parsed[others[r.below(others.len())]].1.clone();
        let dataset_err = |e: crate::probes::ProbeError| FinetuneError::Dataset(e.to_string());
        let (pos_code, _) = semantic_variant(ast, &mut r).map_err(dataset_err)?;
        let (neg_code, _) = semantic_variant(&neg, &mut r).map_err(dataset_err)?;
        let a = data.seqs.len();
        data.seqs.push(encode(&corpus[*i].code));
        data.seqs.push(encode(&pos_code));
        data.seqs.push(encode(&neg_code));
        data.pairs.push(ClonePair { a, b: a + 1, label: true, split: *split });
        data.pairs.push(ClonePair { a, b: a + 2, label: false, split: *split });
    }
    if data.pairs.is_empty() {
        return Err(FinetuneError::Dataset("no clone pairs could be formed".into()));
    }
    Ok(data)
}

/// One next-line example per record with at least two lines; the line to
/// predict is drawn uniformly from lines `1..n`.
pub fn build_completion_data(corpus: &[CorpusRecord], vocab: &Vocabulary, rng: &RngStream) -> CompletionData {
    let spec = SplitSpec::default();
    let mut examples = Vec::new();
    for r in corpus {
        let lines: Vec<&str> = r.code.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() < 2 {
            continue;
        }
        let j = 1 + rng.derive(&format!("completion/{}", r.id)).below(lines.len() - 1);
        let context = vocab.encode(&(lines[..j].join("\n") + "\n"));
        let target = vocab.encode(lines[j]);
        if target.is_empty() {
            continue;
        }
        examples.push(CompletionExample { context, target, split: split_of(&r.id, &spec) });
    }
    CompletionData { examples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_toy_corpus;

    fn setup() -> (Vec<CorpusRecord>, Vocabulary) {
        let c = generate_toy_corpus(1, 120);
        let v = Vocabulary::build(&c, 1).unwrap();
        (c, v)
    }

    #[test]
    fn search_pairs_align() {
        let (c, v) = setup();
        let d = build_search_data(&c, &v, 64);
        assert_eq!(d.code.len(), c.len());
        assert_eq!(d.query[3], v.wrap_truncated(&v.encode(&c[3].doc), 64));
        assert!(d.code.iter().all(|s| s.len() <= 64 && s[0] == v.cls()));
    }

    #[test]
    fn clone_pairs_balanced_and_split_local() {
        let (c, v) = setup();
        let d = build_clone_data(&c, &v, 128, &RngStream::new(0)).unwrap();
        let pos = d.pairs.iter().filter(|p| p.label).count();
        assert_eq!(pos * 2, d.pairs.len());
        assert_eq!(d, build_clone_data(&c, &v, 128, &RngStream::new(0)).unwrap());
        for w in d.pairs.chunks(2) {
            assert_eq!(w[0].a, w[1].a);
            assert_eq!(w[0].split, w[1].split);
            assert!(w[0].label && !w[1].label);
        }
    }

    #[test]
    fn completion_examples() {
        let (c, v) = setup();
        let d = build_completion_data(&c, &v, &RngStream::new(0));
        assert!(d.examples.len() > 100);
        let e = &d.examples[0];
        assert_eq!(*e.context.last().unwrap(), v.newline());
        assert!(!e.target.contains(&v.newline()));
        let (ids, rows, targets) = e.training_ids(v.cls(), v.newline(), 128);
        assert_eq!(ids.len(), 1 + e.context.len() + e.target.len() + 1);
        assert_eq!(rows.len(), e.target.len() + 1);
        assert_eq!(*targets.last().unwrap(), v.newline() as usize);
        // Left truncation keeps [CLS] and the whole target.
        let (short, rows, _) = e.training_ids(v.cls(), v.newline(), e.target.len() + 4);
        assert_eq!(short.len(), e.target.len() + 4);
        assert_eq!(short[0], v.cls());
        assert_eq!(&short[3..short.len() - 1], &e.target[..]);
        assert_eq!(rows[0], 2);
    }

    #[test]
    fn limit_train_keeps_other_splits() {
        let (c, v) = setup();
        let mut d = TaskData::Search(build_search_data(&c, &v, 64));
        let valid = d.indices(Split::Valid).len();
        d.limit_train(10);
        assert_eq!(d.indices(Split::Train).len(), 10);
        assert_eq!(d.indices(Split::Valid).len(), valid);
    }
}
