use std::collections::HashMap;

use super::{NumError, ParamSet, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip applied before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// First/second moment estimates keyed by parameter index.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    step: u64,
    moments: HashMap<usize, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    /// Creates zeroed moments for every trainable parameter.
    pub fn init(params: &ParamSet<T>) -> Self {
        let moments = params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, p)| (i, (vec![T::zero(); p.value.len()], vec![T::zero(); p.value.len()])))
            .collect();
        AdamState { step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every trainable parameter that holds
/// a gradient. Non-trainable parameters are never touched.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<(), NumError> {
    let clip = match cfg.clip_norm {
        Some(max) => {
            let sq: f64 = params
                .iter()
                .filter(|p| p.trainable)
                .filter_map(|p| p.grad.as_ref())
                .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
                .sum();
            let norm = sq.sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (ob1, ob2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let (lr, eps) = (cfg.lr, cfg.eps);
    let clip = T::of(clip);
    for id in 0..params.len() {
        let p = params.get_mut(id);
        if !p.trainable {
            continue;
        }
        let Some(grad) = p.grad.as_ref() else { continue };
        let (m, v) = state
            .moments
            .get_mut(&id)
            .ok_or_else(|| NumError::MissingState(p.name.clone()))?;
        let g = grad.data();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            let gi = g[i] * clip;
            m[i] = b1 * m[i] + ob1 * gi;
            v[i] = b2 * v[i] + ob2 * gi * gi;
            let mhat = m[i].as_f64() / bc1;
            let vhat = v[i].as_f64() / bc2;
            w[i] -= T::of(lr * mhat / (vhat.sqrt() + eps));
        }
        if !p.value.is_finite() {
            return Err(NumError::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}
