//! Every metric against a brute-force reference on 1,000 random instances.
//! Shared by the metric tests and the acceptance suite; each check returns
//! its mismatch count.

#![allow(dead_code)]

use std::collections::HashMap;

use codelayers::metrics::{
    average_precision, edit_sim, exact_match, mean_average_precision, mrr, prf, rank_of, recall_at_k,
};
use codelayers::numcore::RngStream;

pub const INSTANCES: usize = 1000;

/// Rank by explicit descending sort; an item tied with the target sorts
/// before it.
fn sort_rank(scores: &[f64], target: usize) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| (a == target).cmp(&(b == target))));
    idx.iter().position(|&i| i == target).unwrap() + 1
}

pub fn ranking() -> usize {
    let mut rng = RngStream::new(1);
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let n = 1 + rng.below(30);
        // coarse scores so ties occur
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.below(8) as f64).collect()).collect();
        let ranks: Vec<usize> = (0..n).map(|i| rank_of(&rows[i], i)).collect();
        for (i, &r) in ranks.iter().enumerate() {
            mismatches += usize::from(r != sort_rank(&rows[i], i));
        }
        // reciprocal ranks grouped by rank before summing
        let mut by_rank: HashMap<usize, usize> = HashMap::new();
        for &r in &ranks {
            *by_rank.entry(r).or_default() += 1;
        }
        let oracle: f64 = by_rank.iter().map(|(&r, &c)| c as f64 / r as f64).sum::<f64>() / n as f64;
        mismatches += usize::from((mrr(&ranks).unwrap() - oracle).abs() > 1e-12);
        for k in [1, 5, 10] {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            mismatches += usize::from(recall_at_k(&ranks, k).unwrap() != hits as f64 / n as f64);
        }
    }
    mismatches
}

pub fn precision_recall_f1() -> usize {
    let mut rng = RngStream::new(2);
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let n = 1 + rng.below(50);
        let pred: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        let gold: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        let mut table = [[0usize; 2]; 2];
        for i in 0..n {
            table[pred[i] as usize][gold[i] as usize] += 1;
        }
        let (tp, fp, fneg) = (table[1][1], table[1][0], table[0][1]);
        let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        // F1 = 2tp / (2tp + fp + fn), free of the P/R intermediates
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
        let got = prf(&pred, &gold).unwrap();
        mismatches += usize::from(got.precision != p || got.recall != r || (got.f1 - f1).abs() > 1e-12);
    }
    mismatches
}

/// Precision@rank of every relevant item, from pairwise comparisons only.
fn brute_map(emb: &[Vec<f64>], labels: &[usize]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let n = emb.len();
    let mut total = 0.0;
    let mut queries = 0;
    for q in 0..n {
        let sim: Vec<f64> = (0..n).map(|j| cos(&emb[q], &emb[j])).collect();
        let above = |j: usize, i: usize| sim[i] > sim[j] || (sim[i] == sim[j] && i < j);
        let relevant: Vec<usize> = (0..n).filter(|&j| j != q && labels[j] == labels[q]).collect();
        if relevant.is_empty() {
            continue;
        }
        let mut ap = 0.0;
        for &j in &relevant {
            let rank = 1 + (0..n).filter(|&i| i != q && i != j && above(j, i)).count();
            let rel_at_or_above = 1 + relevant.iter().filter(|&&i| i != j && above(j, i)).count();
            ap += rel_at_or_above as f64 / rank as f64;
        }
        total += ap / relevant.len() as f64;
        queries += 1;
    }
    total / queries as f64
}

pub fn mean_average_precision_pairwise() -> usize {
    let mut rng = RngStream::new(3);
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let k = 2 + rng.below(3);
        let n = k + 2 + rng.below(16);
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.below(k) }).collect();
        let emb: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.below(5) as f64 - 2.0 + 0.5).collect()).collect();
        let got = mean_average_precision(&emb, &labels).unwrap();
        mismatches += usize::from((got - brute_map(&emb, &labels)).abs() > 1e-12);
    }
    mismatches
}

/// Full-matrix Levenshtein.
fn lev_table(a: &[char], b: &[char]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            t[i][j] = (t[i - 1][j - 1] + c).min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
        }
    }
    t[a.len()][b.len()]
}

fn random_text(rng: &mut RngStream, alphabet: &[char]) -> String {
    (0..rng.below(12)).map(|_| *rng.choose(alphabet)).collect()
}

pub fn edit_similarity_and_exact_match() -> usize {
    let mut rng = RngStream::new(4);
    let alphabet = ['a', 'b', 'c', ' ', '\t', 'é', '('];
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let a = random_text(&mut rng, &alphabet);
        let b = if rng.bernoulli(0.2) { a.clone() } else { random_text(&mut rng, &alphabet) };
        let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        let n = ca.len().max(cb.len());
        let oracle = if n == 0 { 1.0 } else { 1.0 - lev_table(&ca, &cb) as f64 / n as f64 };
        mismatches += usize::from(edit_sim(&a, &b) != oracle);
        // whitespace normalisation by hand: split on runs, drop empties
        let words = |s: &str| {
            let mut out = Vec::new();
            let mut cur = String::new();
            for ch in s.chars() {
                if ch.is_whitespace() {
                    if !cur.is_empty() {
                        out.push(std::mem::take(&mut cur));
                    }
                } else {
                    cur.push(ch);
                }
            }
            if !cur.is_empty() {
                out.push(cur);
            }
            out
        };
        mismatches += usize::from(exact_match(&a, &b) != (words(&a) == words(&b)));
    }
    mismatches
}

/// MRR of ranks [1,2,4], AP of [T,F,T] and edit similarity of abc/axc.
pub fn worked_examples() -> [(f64, f64); 3] {
    [
        (mrr(&[1, 2, 4]).unwrap(), 0.5833333333333334),
        (average_precision(&[true, false, true]).unwrap(), 0.8333333333333334),
        (edit_sim("abc", "axc"), 0.6666666666666666),
    ]
}
