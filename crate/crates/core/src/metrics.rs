//! Evaluation metrics shared by probes and downstream tasks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{op}: lengths differ ({left} vs {right})")]
    Length { op: &'static str, left: usize, right: usize },
    #[error("{0}: ranks start at 1")]
    ZeroRank(&'static str),
    #[error("{0}")]
    Invalid(String),
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::Length { op, left: a, right: b });
    }
    Ok(())
}

pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> Result<f64, MetricError> {
    same_len("accuracy", pred.len(), gold.len())?;
    if pred.is_empty() {
        return Err(MetricError::Empty("accuracy"));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn check_ranks(op: &'static str, ranks: &[usize]) -> Result<(), MetricError> {
    if ranks.is_empty() {
        return Err(MetricError::Empty(op));
    }
    if ranks.contains(&0) {
        return Err(MetricError::ZeroRank(op));
    }
    Ok(())
}

/// Mean of `1/rank` over 1-based ranks of the true items.
pub fn mrr(ranks: &[usize]) -> Result<f64, MetricError> {
    check_ranks("mrr", ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Fraction of ranks ≤ k.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64, MetricError> {
    check_ranks("recall_at_k", ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Binary precision, recall and F1 with the positive class `true`. An empty
/// denominator yields 0.
pub fn prf(pred: &[bool], gold: &[bool]) -> Result<Prf, MetricError> {
    same_len("prf", pred.len(), gold.len())?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Prf { precision, recall, f1 })
}

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − lev(a,b) / max(|a|,|b|)`; 1.0 when both are empty.
pub fn edit_sim(a: &str, b: &str) -> f64 {
    let n = a.chars().count().max(b.chars().count());
    if n == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / n as f64
}

/// Exact match after collapsing whitespace runs and trimming.
pub fn exact_match(a: &str, b: &str) -> bool {
    let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    norm(a) == norm(b)
}

/// Average precision of one ranked relevance list: the mean of precision@i
/// over the relevant positions. `None` when nothing is relevant.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Mean average precision where each item queries all others, ranked by
/// cosine similarity (ties broken by index). Items whose cluster has no other
/// member are skipped with a warning.
pub fn mean_average_precision(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64, MetricError> {
    same_len("map", embeddings.len(), labels.len())?;
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(MetricError::Invalid("map: need at least two clusters".into()));
    }
    let mut total = 0.0;
    let mut queries = 0usize;
    let mut skipped = 0usize;
    for q in 0..embeddings.len() {
        let mut others: Vec<(f64, usize)> = (0..embeddings.len())
            .filter(|&j| j != q)
            .map(|j| (cosine(&embeddings[q], &embeddings[j]), j))
            .collect();
        others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let rel: Vec<bool> = others.iter().map(|&(_, j)| labels[j] == labels[q]).collect();
        match average_precision(&rel) {
            Some(ap) => {
                total += ap;
                queries += 1;
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("map: skipped {skipped} queries from singleton clusters");
    }
    if queries == 0 {
        return Err(MetricError::Empty("map"));
    }
    Ok(total / queries as f64)
}

/// 1-based rank of `target` when `scores` are sorted descending. Ties count
/// against the target: every item scoring at least as high ranks above it.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores.iter().enumerate().filter(|&(j, &x)| j != target && x >= s).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert!((mrr(&[1, 2, 4]).unwrap() - 0.583_333_333_333_333_4).abs() < 1e-9);
        assert!((edit_sim("abc", "axc") - 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(edit_sim("", "x"), 0.0);
        assert_eq!(edit_sim("", ""), 1.0);
        assert!((average_precision(&[true, false, true]).unwrap() - 0.833_333_333_333_333_4).abs() < 1e-9);
        let all_pos = prf(&[true; 4], &[true, false, true, false]).unwrap();
        assert_eq!((all_pos.precision, all_pos.recall), (0.5, 1.0));
        assert!((all_pos.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(exact_match(" a  b\n", "a b"));
        assert!(mrr(&[]).is_err());
        assert!(mrr(&[0]).is_err());
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 0, 3, 0]).unwrap(), 0.5);
    }

    #[test]
    fn map_perfect_and_singletons() {
        let e = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9], vec![-1.0, -1.0]];
        assert_eq!(mean_average_precision(&e, &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert!(mean_average_precision(&e[..2], &[0, 0]).is_err());
    }
}
