//! Minimal numeric substrate: dense tensors, a reverse-mode tape, Adam and a
//! finite-difference gradient checker.
//!
//! Two precisions are supported through [`Scalar`]: `f32` for training and
//! `f64` for gradient checking.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod rng;
mod scalar;
mod tensor;

use thiserror::Error;

pub use gradcheck::{
    grad_check, grad_check_sampled, grad_check_with, relative_error, sample_coords, GradCheckReport, FD_STEP,
    REL_ERR_FLOOR,
};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamSet, Parameter};
pub use rng::RngStream;
pub use scalar::{Precision, Scalar};
pub use tensor::{dot, matmul, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("axis {axis} out of bounds for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("degenerate zero-norm vector: {0}")]
    DegenerateVector(String),
    #[error("missing optimizer state for trainable parameter {0}")]
    MissingState(String),
    #[error("gradient produced for frozen parameter {0}")]
    FrozenGradient(String),
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("{0}")]
    Invalid(String),
}

/// Softmax of a standalone tensor along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumError> {
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    let y = g.softmax(v, axis)?;
    Ok(g.value(y).clone())
}

/// Row-wise layer normalization of a standalone tensor.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>, NumError> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone())?, g.constant(gain.clone())?, g.constant(bias.clone())?);
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

/// Mean cross-entropy of row logits against class indices.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T, NumError> {
    let mut g = Graph::new();
    let v = g.constant(logits.clone())?;
    let y = g.cross_entropy(v, targets)?;
    Ok(g.value(y).item())
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T, NumError> {
    if u.len() != v.len() {
        return Err(NumError::Shape {
            op: "cosine_similarity",
            left: vec![u.len()],
            right: vec![v.len()],
        });
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu <= T::zero() || nv <= T::zero() {
        return Err(NumError::DegenerateVector("cosine_similarity input".into()));
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::<f64>::vector(vec![0.0, 0.0, 0.0]), 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&Tensor::<f64>::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert!((y.get(0) - 1.0).abs() < 1e-12 && y.get(1).abs() < 1e-12);
        // Independent evaluation: e^k / (e + e² + e³).
        let y = softmax(&Tensor::<f64>::vector(vec![1.0, 2.0, 3.0]), 0).unwrap();
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for k in 0..3 {
            assert!((y.get(k) - ((k + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::<f64>::matrix(2, 2, vec![0.0, 5.0, 0.0, -5.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.get(0) - 0.5).abs() < 1e-15);
        assert!((y.get(1) + y.get(3) - 1.0).abs() < 1e-15);
        assert!(matches!(softmax(&x, 2), Err(NumError::Axis { .. })));
    }

    #[test]
    fn layer_norm_edge_cases() {
        let x = Tensor::<f64>::matrix(1, 4, vec![2.0; 4]).unwrap();
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let y = layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        let x = Tensor::<f64>::matrix(2, 4, vec![1.0, -2.0, 3.0, 0.5, 9.0, 1.0, 1.0, 4.0]).unwrap();
        let bias = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
        let y = layer_norm(&x, &zeros, &bias, 1e-5).unwrap();
        assert_eq!(y.row(0), bias.data());
        assert_eq!(y.row(1), bias.data());
    }

    #[test]
    fn cross_entropy_examples() {
        let c = 7;
        let uniform = Tensor::<f64>::zeros(&[3, c]);
        let l = cross_entropy(&uniform, &[0, 3, 6]).unwrap();
        assert!((l - (c as f64).ln()).abs() < 1e-12);
        let mut sharp = vec![0.0; 2 * c];
        sharp[2] = 60.0;
        sharp[c + 5] = 60.0;
        let l = cross_entropy(&Tensor::matrix(2, c, sharp).unwrap(), &[2, 5]).unwrap();
        assert!(l < 1e-20);
        assert!(matches!(cross_entropy(&uniform, &[0, 1, 7]), Err(NumError::Index { .. })));
    }

    #[test]
    fn cosine_examples() {
        let u = [0.3f64, -1.2, 2.0];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(NumError::DegenerateVector(_))));
    }
}
