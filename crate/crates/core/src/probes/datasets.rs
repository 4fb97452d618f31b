use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ProbeDataset, ProbeError, ProbeExample, ProbeInput, ProbeTask};
use crate::codeprops::{
    ast_only, bound_names, build_cfg, cyclomatic, for_range_to_while, lex_classify, parse, rename_identifiers,
    serialize_ast, swap_independent_assignments, unparse, AstNode, LexClass,
};
use crate::corpus::{
    common_names, function_names, generate_function, problem_tags, split_of, CorpusRecord, GenConfig, Split,
    SplitSpec, Vocabulary,
};
use crate::numcore::RngStream;

/// Complexity buckets 1…9 and ≥10.
pub const COMPLEXITY_CLASSES: usize = 10;

/// Class index of a cyclomatic complexity: M=1 → 0, …, M≥10 → 9.
pub fn complexity_class(m: usize) -> usize {
    m.clamp(1, COMPLEXITY_CLASSES) - 1
}

/// `[CLS] body [SEP]`, with the body cut so the result fits `max_len`.
fn wrap(vocab: &Vocabulary, body: &[u32], max_len: usize) -> Vec<u32> {
    vocab.wrap_truncated(body, max_len)
}

/// One example per lexer token of each snippet; the example points at the
/// token's row in the wrapped sequence. Snippets that do not lex are skipped.
pub fn build_lexical_dataset(corpus: &[CorpusRecord], vocab: &Vocabulary, max_len: usize) -> ProbeDataset {
    let spec = SplitSpec::default();
    let mut sequences = Vec::new();
    let mut examples = Vec::new();
    for r in corpus {
        let Ok(tokens) = lex_classify(&r.code) else { continue };
        let enc = vocab.encode_aligned(&r.code);
        let ids = wrap(vocab, &enc.ids, max_len);
        let split = split_of(&r.id, &spec);
        let seq = sequences.len();
        for (t, &pos) in tokens.iter().zip(&enc.lex_positions) {
            let row = pos + 1;
            if row + 1 < ids.len() {
                examples.push(ProbeExample {
                    input: ProbeInput::Token { seq, row },
                    label: t.class.index(),
                    split,
                });
            }
        }
        sequences.push(ids);
    }
    ProbeDataset { task: ProbeTask::Lexical, sequences, examples, num_classes: LexClass::ALL.len() }
}

/// Balanced code/AST-Only matching. Every code snippet yields a true pair with
/// its own AST-Only and a false pair with the AST-Only of another snippet in
/// the same split whose serialization differs; snippets without such a
/// partner are dropped entirely.
pub fn build_syntactic_dataset(
    corpus: &[CorpusRecord],
    vocab: &Vocabulary,
    max_len: usize,
    rng: &RngStream,
) -> Result<ProbeDataset, ProbeError> {
    if corpus.len() < 2 {
        return Err(ProbeError::Dataset("syntactic probe needs at least two snippets".into()));
    }
    let spec = SplitSpec::default();
    let mut parsed = Vec::new();
    for r in corpus {
        if let Ok(ast) = parse(&r.code) {
            parsed.push((r, serialize_ast(&ast_only(&ast))));
        }
    }
    let mut sequences = Vec::new();
    let mut code_seq = Vec::new();
    let mut ast_seq = Vec::new();
    for (r, ser) in &parsed {
        code_seq.push(sequences.len());
        sequences.push(wrap(vocab, &vocab.encode(&r.code), max_len));
        ast_seq.push(sequences.len());
        sequences.push(wrap(vocab, &vocab.encode_tokens(ser), max_len));
    }
    let splits: Vec<Split> = parsed.iter().map(|(r, _)| split_of(&r.id, &spec)).collect();
    let mut examples = Vec::new();
    for i in 0..parsed.len() {
        let mut r = rng.derive(&format!("negative/{i}"));
        let mut candidates: Vec<usize> =
            (0..parsed.len()).filter(|&j| j != i && splits[j] == splits[i]).collect();
        r.shuffle(&mut candidates);
        let Some(&j) = candidates.iter().find(|&&j| parsed[j].1 != parsed[i].1) else { continue };
        examples.push(ProbeExample { input: ProbeInput::Pair(code_seq[i], ast_seq[i]), label: 1, split: splits[i] });
        examples.push(ProbeExample { input: ProbeInput::Pair(code_seq[i], ast_seq[j]), label: 0, split: splits[i] });
    }
    if examples.is_empty() {
        return Err(ProbeError::Dataset("no snippet has a distinct AST-Only partner".into()));
    }
    Ok(ProbeDataset { task: ProbeTask::Syntactic, sequences, examples, num_classes: 2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticConfig {
    /// Number of clusters; cluster `c` uses problem `c mod #problems`.
    pub problems: usize,
    pub variants: usize,
    /// Fraction of clusters held out for validation and for test each.
    pub holdout: f64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        SemanticConfig { problems: 25, variants: 8, holdout: 0.2 }
    }
}

/// A semantics-preserving rewrite of one function: consistent renaming of
/// its bound names and its own name, optionally preceded by swapping
/// independent assignments and rewriting a `for … in range` loop as `while`.
/// Returns the new source and whether only renaming was applied.
pub fn semantic_variant(base: &AstNode, rng: &mut RngStream) -> Result<(String, bool), ProbeError> {
    let mut ast = base.clone();
    let mut rename_only = true;
    if rng.bernoulli(0.5) {
        if let Some(s) = swap_independent_assignments(&ast, rng.below(2)) {
            ast = s;
            rename_only = false;
        }
    }
    if rng.bernoulli(0.5) {
        if let Some(w) = for_range_to_while(&ast) {
            ast = w;
            rename_only = false;
        }
    }
    let func = if ast.kind == "Module" { ast.children[0].clone() } else { ast.clone() };
    let bound: Vec<String> = bound_names(&func).into_iter().collect();
    let mut pool: Vec<&str> = common_names().to_vec();
    rng.shuffle(&mut pool);
    // names the function reads but does not bind must stay free
    let mut used = Vec::new();
    func.walk(&mut |n| {
        if n.kind == "Identifier" {
            if let Some(v) = &n.value {
                used.push(v.clone());
            }
        }
    });
    let free: Vec<&String> = used.iter().filter(|v| !bound.contains(v)).collect();
    let targets: Vec<&str> = pool.into_iter().filter(|p| !free.iter().any(|f| f.as_str() == *p)).collect();
    if targets.len() < bound.len() {
        return Err(ProbeError::Dataset("not enough fresh names for renaming".into()));
    }
    let mut map: HashMap<String, String> =
        bound.iter().cloned().zip(targets.iter().map(|s| s.to_string())).collect();
    if let Some(name) = func.children.first().and_then(|n| n.value.clone()) {
        let names = function_names();
        map.insert(name, rng.choose(&names).to_string());
    }
    let renamed = rename_identifiers(&ast, &map);
    let code = unparse(&renamed)?;
    parse(&code)?;
    Ok((code, rename_only))
}

/// Clusters of semantically equivalent variants. The label is the cluster
/// index; clusters (not variants) are split between train, valid and test.
pub fn build_semantic_dataset(
    cfg: &SemanticConfig,
    vocab: &Vocabulary,
    max_len: usize,
    rng: &RngStream,
) -> Result<ProbeDataset, ProbeError> {
    let held = ((cfg.problems as f64 * cfg.holdout).round() as usize).max(2);
    if cfg.problems < 2 * held + 2 || cfg.variants < 2 {
        return Err(ProbeError::Dataset(format!(
            "semantic probe needs at least {} clusters of two or more variants",
            2 * held + 2
        )));
    }
    let gen = GenConfig { rare_identifier: 0.0, rare_number: 0.0, rare_string: 0.0, guard_prob: 0.0, max_guards: 0 };
    let n_problems = problem_tags().len();
    let mut order: Vec<(u64, usize)> = (0..cfg.problems)
        .map(|c| {
            let d = Sha256::digest(format!("{}/cluster/{c}", rng.seed()).as_bytes());
            (u64::from_le_bytes(d[..8].try_into().expect("8 bytes")), c)
        })
        .collect();
    order.sort_unstable();
    let split_of_cluster: BTreeMap<usize, Split> = order
        .iter()
        .enumerate()
        .map(|(rank, &(_, c))| {
            let s = if rank < held {
                Split::Test
            } else if rank < 2 * held {
                Split::Valid
            } else {
                Split::Train
            };
            (c, s)
        })
        .collect();
    let mut sequences = Vec::new();
    let mut examples = Vec::new();
    for c in 0..cfg.problems {
        let mut r = rng.derive(&format!("cluster/{c}"));
        let base = generate_function(c % n_problems, &mut r, &gen);
        let ast = parse(&base.code)?;
        let mut made = 0;
        let mut attempts = 0;
        while made < cfg.variants {
            attempts += 1;
            if attempts > 20 * cfg.variants {
                return Err(ProbeError::Dataset(format!("cluster {c}: could not produce valid variants")));
            }
            let Ok((code, _)) = semantic_variant(&ast, &mut r) else { continue };
            examples.push(ProbeExample {
                input: ProbeInput::Sequence(sequences.len()),
                label: c,
                split: split_of_cluster[&c],
            });
            sequences.push(wrap(vocab, &vocab.encode(&code), max_len));
            made += 1;
        }
    }
    Ok(ProbeDataset { task: ProbeTask::Semantic, sequences, examples, num_classes: cfg.problems })
}

/// Cyclomatic complexity bucket of every parsable snippet.
pub fn build_structural_dataset(corpus: &[CorpusRecord], vocab: &Vocabulary, max_len: usize) -> ProbeDataset {
    let spec = SplitSpec::default();
    let mut sequences = Vec::new();
    let mut examples = Vec::new();
    for r in corpus {
        let Ok(ast) = parse(&r.code) else { continue };
        let Ok(cfg) = build_cfg(&ast) else { continue };
        examples.push(ProbeExample {
            input: ProbeInput::Sequence(sequences.len()),
            label: complexity_class(cyclomatic(&cfg)),
            split: split_of(&r.id, &spec),
        });
        sequences.push(wrap(vocab, &vocab.encode(&r.code), max_len));
    }
    ProbeDataset { task: ProbeTask::Structural, sequences, examples, num_classes: COMPLEXITY_CLASSES }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_toy_corpus;

    fn setup() -> (Vec<CorpusRecord>, Vocabulary) {
        let c = generate_toy_corpus(21, 120);
        let v = Vocabulary::build(&c, 1).unwrap();
        (c, v)
    }

    #[test]
    fn lexical_labels_follow_lexer() {
        let v = Vocabulary::build(&[CorpusRecord::new("x = 1\n", "", "minipy")], 1).unwrap();
        let d = build_lexical_dataset(&[CorpusRecord::new("x = 1\n", "", "minipy")], &v, 128);
        let labels: Vec<usize> = d.examples.iter().map(|e| e.label).collect();
        assert_eq!(labels, vec![LexClass::Identifier.index(), LexClass::Operator.index(), LexClass::Number.index()]);
        let rows: Vec<ProbeInput> = d.examples.iter().map(|e| e.input).collect();
        assert_eq!(rows[0], ProbeInput::Token { seq: 0, row: 1 });
        assert_eq!(v.token(d.sequences[0][3]), Some("1"));

        let (c, v) = setup();
        let d = build_lexical_dataset(&c, &v, 512);
        let mut hist = [0usize; 5];
        for r in &c {
            for t in lex_classify(&r.code).unwrap() {
                hist[t.class.index()] += 1;
            }
        }
        let mut got = [0usize; 5];
        for e in &d.examples {
            got[e.label] += 1;
        }
        assert_eq!(hist, got);
    }

    #[test]
    fn syntactic_balanced_and_distinct() {
        let (c, v) = setup();
        let d = build_syntactic_dataset(&c, &v, 512, &RngStream::new(0)).unwrap();
        let pos = d.examples.iter().filter(|e| e.label == 1).count();
        assert_eq!(pos * 2, d.examples.len());
        for e in d.examples.iter().filter(|e| e.label == 0) {
            let ProbeInput::Pair(a, b) = e.input else { panic!() };
            assert_ne!(b, a + 1);
            assert_ne!(d.sequences[b], d.sequences[a + 1]);
        }
        assert!(build_syntactic_dataset(&c[..1], &v, 512, &RngStream::new(0)).is_err());
    }

    #[test]
    fn semantic_clusters() {
        let (_, v) = setup();
        let cfg = SemanticConfig { problems: 10, variants: 8, holdout: 0.2 };
        let d = build_semantic_dataset(&cfg, &v, 128, &RngStream::new(4)).unwrap();
        assert_eq!(d.examples.len(), 80);
        let mut labels: Vec<usize> = d.examples.iter().map(|e| e.label).collect();
        labels.dedup();
        assert_eq!(labels.len(), 10);
        for c in 0..10 {
            let splits: Vec<Split> = d.examples.iter().filter(|e| e.label == c).map(|e| e.split).collect();
            assert!(splits.windows(2).all(|w| w[0] == w[1]));
        }
        assert_eq!(d.count(Split::Test), 16);
    }

    #[test]
    fn rename_only_variants_keep_ast_only() {
        let mut r = RngStream::new(8);
        let gen = GenConfig::default();
        let mut checked = 0;
        for p in 0..problem_tags().len() {
            let f = generate_function(p, &mut r, &gen);
            let ast = parse(&f.code).unwrap();
            for _ in 0..4 {
                let (code, rename_only) = semantic_variant(&ast, &mut r).unwrap();
                if rename_only {
                    assert_eq!(ast_only(&parse(&code).unwrap()), ast_only(&ast), "{}\n{code}", f.code);
                    checked += 1;
                }
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn structural_buckets() {
        assert_eq!(complexity_class(1), 0);
        assert_eq!(complexity_class(9), 8);
        assert_eq!(complexity_class(23), 9);
        let straight = CorpusRecord::new("def f(a):\n    b = a\n    return b\n", "", "minipy");
        let v = Vocabulary::build(&[straight.clone()], 1).unwrap();
        assert_eq!(build_structural_dataset(&[straight], &v, 64).examples[0].label, 0);
        let (c, v) = setup();
        let d = build_structural_dataset(&c, &v, 128);
        for (e, r) in d.examples.iter().zip(&c) {
            let m = r.meta.as_ref().unwrap().predicates + 1;
            assert_eq!(e.label, complexity_class(m));
        }
    }
}
