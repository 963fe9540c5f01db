//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::tensor::Tensor;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    /// Zero moments shaped like `params`, hyperparameters from `cfg`.
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One update:
///
/// ```text
/// θ ← θ − lr·λ·θ                       (only where decay[i])
/// m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
/// θ ← θ − lr · m̂ / (√v̂ + ε),  m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
/// ```
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], decay: &[bool], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        return Err(invalid(format!(
            "{} parameters, {} gradients, {} moment slots, {} decay flags",
            params.len(),
            grads.len(),
            state.m.len(),
            decay.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(invalid(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, lr) = (state.beta1, state.beta2, state.lr);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let shrink = if decay[i] { 1.0 - lr * state.weight_decay } else { 1.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + state.eps);
            *w = *w * shrink - lr * update;
        }
    }
    Ok(())
}
