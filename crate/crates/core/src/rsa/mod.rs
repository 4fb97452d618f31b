//! Representational similarity analysis between two encoders.
//!
//! Each snippet is reduced to one vector per layer by mean pooling; the
//! layer's cosine-similarity matrix over the snippet set is compared across
//! models with a Pearson correlation over the strict upper triangle.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusRecord, Vocabulary, SPECIALS};
use crate::model::{forward, AttentionMode, EncoderParams, ModelError};
use crate::numcore::{dot, RngStream, Scalar};
use crate::par::{self, Exec};
use crate::report;

/// Desk-scale default snippet count.
pub const DEFAULT_N: usize = 500;

#[derive(Debug, Error)]
pub enum RsaError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("snippet {0} is empty after pooling")]
    EmptySnippet(usize),
    #[error("snippet {0} has a zero-norm representation")]
    DegenerateVector(usize),
    #[error("need at least 3 items, got {0}")]
    TooFew(usize),
    #[error("matrix sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("correlation undefined: zero variance in the upper triangle")]
    ZeroVariance,
    #[error("models have different configurations")]
    ConfigMismatch,
    #[error("requested {requested} snippets from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which positions enter the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Every position, `[CLS]` and `[SEP]` included.
    #[default]
    AllTokens,
    /// Only ids outside the special-token range.
    ExcludeSpecials,
}

fn keep(pooling: Pooling, id: u32) -> bool {
    match pooling {
        Pooling::AllTokens => true,
        Pooling::ExcludeSpecials => id as usize >= SPECIALS.len(),
    }
}

fn pool<T: Scalar>(h: &crate::numcore::Tensor<T>, ids: &[u32], pooling: Pooling) -> Option<Vec<f64>> {
    let d = h.cols();
    let mut acc = vec![0.0f64; d];
    let mut n = 0usize;
    for (r, &id) in ids.iter().enumerate() {
        if keep(pooling, id) {
            for (a, v) in acc.iter_mut().zip(h.row(r)) {
                *a += v.as_f64();
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Some(acc)
}

/// Pooled vectors for every layer: `out[l][k]` is snippet `k` at layer `l`.
pub fn repr_layers<T: Scalar>(
    params: &EncoderParams<T>,
    snippets: &[Vec<u32>],
    pooling: Pooling,
    exec: Exec,
) -> Result<Vec<Vec<Vec<f64>>>, RsaError> {
    let per_snippet = par::try_map_range(exec, snippets.len(), |k| -> Result<Vec<Vec<f64>>, RsaError> {
        let ids = &snippets[k];
        if ids.is_empty() {
            return Err(RsaError::EmptySnippet(k));
        }
        let trace = forward(ids, params, AttentionMode::Bidirectional)?;
        trace.h.iter().map(|h| pool(h, ids, pooling).ok_or(RsaError::EmptySnippet(k))).collect()
    })?;
    let layers = params.config.num_layers + 1;
    Ok((0..layers).map(|l| per_snippet.iter().map(|s| s[l].clone()).collect()).collect())
}

/// Pooled vectors of one layer.
pub fn repr_vectors<T: Scalar>(
    params: &EncoderParams<T>,
    snippets: &[Vec<u32>],
    layer: usize,
    pooling: Pooling,
    exec: Exec,
) -> Result<Vec<Vec<f64>>, RsaError> {
    if layer > params.config.num_layers {
        return Err(ModelError::FreezeRange { k: layer, layers: params.config.num_layers }.into());
    }
    Ok(repr_layers(params, snippets, pooling, exec)?.swap_remove(layer))
}

/// Symmetric `N×N` cosine-similarity matrix with a unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Entries `(i, j)` with `i < j`, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.n.saturating_sub(1) / 2);
        for i in 0..self.n {
            out.extend_from_slice(&self.row(i)[i + 1..]);
        }
        out
    }
}

/// Pairwise cosine similarities; rows are computed in parallel.
pub fn distance_matrix(vectors: &[Vec<f64>], exec: Exec) -> Result<DistanceMatrix, RsaError> {
    let n = vectors.len();
    let mut unit = Vec::with_capacity(n);
    for (k, v) in vectors.iter().enumerate() {
        let norm = dot(v, v).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(RsaError::DegenerateVector(k));
        }
        unit.push(v.iter().map(|x| x / norm).collect::<Vec<f64>>());
    }
    let upper: Vec<Vec<f64>> =
        par::map_range(exec, n, |i| (i + 1..n).map(|j| dot(&unit[i], &unit[j]).clamp(-1.0, 1.0)).collect());
    let mut data = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        data[i * n + i] = 1.0;
        for (off, &c) in row.iter().enumerate() {
            let j = i + 1 + off;
            data[i * n + j] = c;
            data[j * n + i] = c;
        }
    }
    Ok(DistanceMatrix { n, data })
}

/// Pearson correlation of the strict upper triangles (two-pass).
pub fn pearson(m1: &DistanceMatrix, m2: &DistanceMatrix) -> Result<f64, RsaError> {
    if m1.n != m2.n {
        return Err(RsaError::SizeMismatch(m1.n, m2.n));
    }
    if m1.n < 3 {
        return Err(RsaError::TooFew(m1.n));
    }
    pearson_slices(&m1.upper_triangle(), &m2.upper_triangle())
}

fn pearson_slices(x: &[f64], y: &[f64]) -> Result<f64, RsaError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(RsaError::ZeroVariance);
    }
    // sqrt(s*s) == s in IEEE arithmetic, so identical inputs give exactly 1.
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    FairlySimilar,
    Intermediate,
    Dissimilar,
}

impl Band {
    pub fn of(rho: f64) -> Band {
        if rho >= 0.8 {
            Band::FairlySimilar
        } else if rho < 0.5 {
            Band::Dissimilar
        } else {
            Band::Intermediate
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Band::FairlySimilar => "fairly similar",
            Band::Intermediate => "intermediate",
            Band::Dissimilar => "dissimilar",
        }
    }
}

/// ρˡ for each layer of two sets of pooled representations.
pub fn compare_representations(
    a: &[Vec<Vec<f64>>],
    b: &[Vec<Vec<f64>>],
    exec: Exec,
) -> Result<Vec<f64>, RsaError> {
    if a.len() != b.len() {
        return Err(RsaError::SizeMismatch(a.len(), b.len()));
    }
    a.iter()
        .zip(b)
        .map(|(la, lb)| pearson(&distance_matrix(la, exec)?, &distance_matrix(lb, exec)?))
        .collect()
}

/// A reproducible snippet sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetSample {
    /// Positions in the source corpus, ascending.
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    pub seed: u64,
    pub hash: String,
}

/// 16 hex digits of SHA-256 over the newline-joined record ids.
pub fn sample_hash(ids: &[String]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

/// Uniform sample of `n` records without replacement.
pub fn sample_snippets(corpus: &[CorpusRecord], n: usize, seed: u64) -> Result<SnippetSample, RsaError> {
    if n > corpus.len() {
        return Err(RsaError::SampleTooLarge { requested: n, available: corpus.len() });
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    RngStream::new(seed).derive("rsa/sample").shuffle(&mut idx);
    idx.truncate(n);
    idx.sort_unstable();
    let ids: Vec<String> = idx.iter().map(|&i| corpus[i].id.clone()).collect();
    Ok(SnippetSample { hash: sample_hash(&ids), indices: idx, ids, seed })
}

impl SnippetSample {
    /// Token sequences wrapped in `[CLS] … [SEP]` and cut to `max_len`.
    pub fn encode(&self, corpus: &[CorpusRecord], vocab: &Vocabulary, max_len: usize) -> Vec<Vec<u32>> {
        self.indices.iter().map(|&i| vocab.wrap_truncated(&vocab.encode(&corpus[i].code), max_len)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRsa {
    pub l: usize,
    pub rho: f64,
    pub band: Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsaReport {
    pub layers: Vec<LayerRsa>,
    #[serde(rename = "N")]
    pub n: usize,
    pub seed: u64,
    #[serde(rename = "modelA")]
    pub model_a: String,
    #[serde(rename = "modelB")]
    pub model_b: String,
    pub snippet_hash: String,
    pub pooling: Pooling,
    /// Entries entering the correlation.
    pub triangle: String,
}

impl RsaReport {
    pub fn rhos(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.rho).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<(), RsaError> {
        Ok(report::write_json(path, self)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), RsaError> {
        let rows: Vec<Vec<String>> = self
            .layers
            .iter()
            .map(|l| vec![l.l.to_string(), format!("{:.12}", l.rho), l.band.label().to_string()])
            .collect();
        Ok(report::write_csv(path, &["layer", "rho", "band"], &rows)?)
    }
}

#[derive(Debug, Clone)]
pub struct RsaOptions {
    pub model_a: String,
    pub model_b: String,
    pub pooling: Pooling,
    pub exec: Exec,
}

/// Layer-wise RSA of two same-shape encoders on a snippet sample.
pub fn rsa_compare<T: Scalar>(
    a: &EncoderParams<T>,
    b: &EncoderParams<T>,
    sample: &SnippetSample,
    sequences: &[Vec<u32>],
    opts: &RsaOptions,
) -> Result<RsaReport, RsaError> {
    if !a.config.same_shape(&b.config) {
        return Err(RsaError::ConfigMismatch);
    }
    if sequences.len() != sample.indices.len() {
        return Err(RsaError::SizeMismatch(sequences.len(), sample.indices.len()));
    }
    let ra = repr_layers(a, sequences, opts.pooling, opts.exec)?;
    let rb = repr_layers(b, sequences, opts.pooling, opts.exec)?;
    let rhos = compare_representations(&ra, &rb, opts.exec)?;
    Ok(RsaReport {
        layers: rhos.into_iter().enumerate().map(|(l, rho)| LayerRsa { l, rho, band: Band::of(rho) }).collect(),
        n: sequences.len(),
        seed: sample.seed,
        model_a: opts.model_a.clone(),
        model_b: opts.model_b.clone(),
        snippet_hash: sample.hash.clone(),
        pooling: opts.pooling,
        triangle: "strict_upper".into(),
    })
}

/// Haar-distributed `d×d` orthogonal matrix (rows), via Gram–Schmidt on
/// Gaussian columns.
pub fn random_orthogonal(d: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for u in &q {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

/// `Q v` for every vector.
pub fn rotate(q: &[Vec<f64>], vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    vectors.iter().map(|v| q.iter().map(|row| dot(row, v)).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_toy_corpus;
    use crate::model::ModelConfig;

    fn direct(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        vs.iter()
            .map(|a| {
                vs.iter()
                    .map(|b| {
                        let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        let aa: f64 = a.iter().map(|x| x * x).sum();
                        let bb: f64 = b.iter().map(|x| x * x).sum();
                        ab / (aa.sqrt() * bb.sqrt())
                    })
                    .collect()
            })
            .collect()
    }

    fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = RngStream::new(seed);
        (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
    }

    #[test]
    fn basis_gives_identity_and_scale_invariance() {
        let e: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let m = distance_matrix(&e, Exec::default()).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let v = vec![vec![1.0, 2.0, -1.0], vec![2.0, 4.0, -2.0], vec![0.5, -1.0, 3.0]];
        let m = distance_matrix(&v, Exec::default()).unwrap();
        assert!((m.get(0, 2) - m.get(1, 2)).abs() < 1e-15);
        assert!((m.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_oracle() {
        let v = random_vectors(10, 7, 3);
        let m = distance_matrix(&v, Exec::default()).unwrap();
        let o = direct(&v);
        for i in 0..10 {
            for j in 0..10 {
                assert!((m.get(i, j) - o[i][j]).abs() < 1e-9);
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        let seq = distance_matrix(&v, Exec::Sequential).unwrap();
        assert_eq!(seq, m);
    }

    #[test]
    fn zero_vector_is_named() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(distance_matrix(&v, Exec::default()), Err(RsaError::DegenerateVector(1))));
    }

    #[test]
    fn pearson_identities_and_errors() {
        let v = random_vectors(6, 4, 1);
        let a = distance_matrix(&v, Exec::default()).unwrap();
        assert_eq!(pearson(&a, &a).unwrap(), 1.0);
        let neg = DistanceMatrix { n: a.n, data: a.data.iter().map(|x| -x).collect() };
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let small = distance_matrix(&v[..2], Exec::default()).unwrap();
        assert!(matches!(pearson(&small, &small), Err(RsaError::TooFew(2))));
        let flat = DistanceMatrix { n: 3, data: vec![1.0; 9] };
        assert!(matches!(pearson(&flat, &a), Err(RsaError::SizeMismatch(3, 6))));
        assert!(matches!(pearson(&flat, &flat), Err(RsaError::ZeroVariance)));
    }

    #[test]
    fn pearson_fixed_matrices() {
        #[rustfmt::skip]
        let m1 = DistanceMatrix { n: 4, data: vec![
            1.0, 0.2, -0.4, 0.7,
            0.2, 1.0, 0.1, -0.3,
            -0.4, 0.1, 1.0, 0.5,
            0.7, -0.3, 0.5, 1.0] };
        #[rustfmt::skip]
        let m2 = DistanceMatrix { n: 4, data: vec![
            1.0, 0.3, -0.1, 0.6,
            0.3, 1.0, 0.0, -0.5,
            -0.1, 0.0, 1.0, 0.2,
            0.6, -0.5, 0.2, 1.0] };
        // One-pass textbook form over the upper triangles
        // x = (0.2,-0.4,0.7,0.1,-0.3,0.5), y = (0.3,-0.1,0.6,0.0,-0.5,0.2).
        let (n, sx, sy, sxy, sxx, syy) = (6.0, 0.8, 0.5, 0.77, 1.04, 0.75);
        let expect = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy) as f64).sqrt();
        assert!((pearson(&m1, &m2).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn rotation_invariance() {
        let v = random_vectors(20, 8, 9);
        let q = random_orthogonal(8, &mut RngStream::new(4));
        let rho = compare_representations(&[v.clone()], &[rotate(&q, &v)], Exec::default()).unwrap();
        assert!((rho[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sampling_is_reproducible() {
        let corpus = generate_toy_corpus(0, 30);
        let a = sample_snippets(&corpus, 10, 5).unwrap();
        assert_eq!(a, sample_snippets(&corpus, 10, 5).unwrap());
        assert_ne!(a.indices, sample_snippets(&corpus, 10, 6).unwrap().indices);
        assert_eq!(a.hash, sample_hash(&a.ids));
        let all = sample_snippets(&corpus, 30, 1).unwrap();
        assert_eq!(all.indices, (0..30).collect::<Vec<_>>());
        assert!(matches!(sample_snippets(&corpus, 31, 1), Err(RsaError::SampleTooLarge { .. })));
    }

    #[test]
    fn self_comparison_and_pooling() {
        let corpus = generate_toy_corpus(0, 40);
        let vocab = Vocabulary::build(&corpus, 1).unwrap();
        let mut cfg = ModelConfig::desk(vocab.len());
        cfg.num_layers = 2;
        let p = EncoderParams::<f64>::init(&cfg, &RngStream::new(0)).unwrap();
        let s = sample_snippets(&corpus, 12, 0).unwrap();
        let seqs = s.encode(&corpus, &vocab, cfg.max_positions);
        let opts = RsaOptions { model_a: "a".into(), model_b: "a".into(), pooling: Pooling::AllTokens, exec: Exec::default() };
        let r = rsa_compare(&p, &p, &s, &seqs, &opts).unwrap();
        assert_eq!(r.layers.len(), 3);
        assert!(r.rhos().iter().all(|&x| x == 1.0));
        assert!(r.layers.iter().all(|l| l.band == Band::FairlySimilar));

        // Single-token snippet: pooled vector is that row.
        let one = vec![vec![vocab.id("x")]];
        let trace = forward(&one[0], &p, AttentionMode::Bidirectional).unwrap();
        let v = repr_vectors(&p, &one, 2, Pooling::AllTokens, Exec::default()).unwrap();
        assert_eq!(v[0], trace.h[2].row(0).to_vec());
        let specials = vec![vec![vocab.cls(), vocab.sep()]];
        assert!(matches!(
            repr_vectors(&p, &specials, 0, Pooling::ExcludeSpecials, Exec::default()),
            Err(RsaError::EmptySnippet(0))
        ));

        let mut other = cfg.clone();
        other.num_layers = 3;
        let q = EncoderParams::<f64>::init(&other, &RngStream::new(0)).unwrap();
        assert!(matches!(rsa_compare(&p, &q, &s, &seqs, &opts), Err(RsaError::ConfigMismatch)));
    }

    #[test]
    fn bands() {
        assert_eq!(Band::of(0.8), Band::FairlySimilar);
        assert_eq!(Band::of(0.79), Band::Intermediate);
        assert_eq!(Band::of(0.5), Band::Intermediate);
        assert_eq!(Band::of(0.49), Band::Dissimilar);
    }
}
