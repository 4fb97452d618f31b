use super::{ProbeDataset, ProbeError, ProbeInput};
use crate::model::{forward, mean_rows, ActivationTrace, AttentionMode, EncoderParams};
use crate::numcore::{Scalar, Tensor};
use crate::par::{self, Exec};

/// Layer-wise traces of many sequences, computed in parallel.
pub fn represent<T: Scalar>(
    params: &EncoderParams<T>,
    seqs: &[Vec<u32>],
    mode: AttentionMode,
    exec: Exec,
) -> Result<Vec<ActivationTrace<T>>, ProbeError> {
    Ok(par::try_map(exec, seqs, |s| forward(s, params, mode))?)
}

/// Mean over all positions (special tokens included) of every layer.
pub fn pooled_layers<T: Scalar>(trace: &ActivationTrace<T>) -> Vec<Vec<T>> {
    trace.h.iter().map(mean_rows).collect()
}

/// Per-layer probe inputs: `a[l]` is an `N×d` matrix with one row per
/// example; pair tasks carry the second member in `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub a: Vec<Tensor<f32>>,
    pub b: Option<Vec<Tensor<f32>>>,
}

impl Features {
    pub fn num_layers(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.a[0].cols()
    }

    pub fn len(&self) -> usize {
        self.a[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Z-scores every layer's columns with statistics of the given rows
    /// (both pair members pooled). Constant columns are only centred.
    pub fn standardize(&mut self, rows: &[usize]) {
        let d = self.dim();
        for l in 0..self.num_layers() {
            let mut sum = vec![0.0f64; d];
            let mut sq = vec![0.0f64; d];
            let mut count = 0usize;
            let mats = std::iter::once(&self.a[l]).chain(self.b.as_ref().map(|b| &b[l]));
            for m in mats {
                for &r in rows {
                    for (j, v) in m.row(r).iter().enumerate() {
                        sum[j] += *v as f64;
                        sq[j] += (*v as f64) * (*v as f64);
                    }
                }
                count += rows.len();
            }
            if count == 0 {
                continue;
            }
            let n = count as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let scale: Vec<f64> = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| {
                    let sd = (q / n - m * m).max(0.0).sqrt();
                    if sd > 1e-12 { 1.0 / sd } else { 1.0 }
                })
                .collect();
            let fix = |t: &mut Tensor<f32>| {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    let j = i % d;
                    *v = ((*v as f64 - mean[j]) * scale[j]) as f32;
                }
            };
            fix(&mut self.a[l]);
            if let Some(b) = self.b.as_mut() {
                fix(&mut b[l]);
            }
        }
    }
}

/// Runs the frozen encoder over every dataset sequence and gathers the
/// per-layer rows each example needs.
pub fn extract_features<T: Scalar>(
    params: &EncoderParams<T>,
    data: &ProbeDataset,
    exec: Exec,
) -> Result<Features, ProbeError> {
    let traces = represent(params, &data.sequences, AttentionMode::Bidirectional, exec)?;
    let pooled: Vec<Vec<Vec<T>>> = par::map(exec, &traces, pooled_layers);
    let layers = params.config.num_layers + 1;
    let d = params.config.hidden_dim;
    let n = data.examples.len();
    let pair = data.examples.iter().any(|e| matches!(e.input, ProbeInput::Pair(..)));
    let mut a = vec![Vec::with_capacity(n * d); layers];
    let mut b = vec![Vec::with_capacity(if pair { n * d } else { 0 }); layers];
    let push = |dst: &mut Vec<f32>, row: &[T]| dst.extend(row.iter().map(|v| v.as_f64() as f32));
    for e in &data.examples {
        for l in 0..layers {
            match e.input {
                ProbeInput::Token { seq, row } => push(&mut a[l], traces[seq].h[l].row(row)),
                ProbeInput::Sequence(s) => push(&mut a[l], &pooled[s][l]),
                ProbeInput::Pair(x, y) => {
                    push(&mut a[l], &pooled[x][l]);
                    push(&mut b[l], &pooled[y][l]);
                }
            }
        }
    }
    let to_mats = |v: Vec<Vec<f32>>| -> Result<Vec<Tensor<f32>>, ProbeError> {
        v.into_iter().map(|x| Ok(Tensor::new(vec![n, d], x)?)).collect()
    };
    Ok(Features { a: to_mats(a)?, b: if pair { Some(to_mats(b)?) } else { None } })
}
