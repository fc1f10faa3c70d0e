//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub m: Tensor,
    pub v: Tensor,
}

impl MomentState {
    pub fn zeros_like(t: &Tensor) -> Self {
        MomentState { m: Tensor::zeros(t.shape()), v: Tensor::zeros(t.shape()) }
    }
}

/// One AdamW update of a single tensor. `step` is 1-based.
pub fn adamw_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut MomentState,
    cfg: &AdamWConfig,
    lr: f64,
    step: u64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() || param.shape() != state.v.shape() {
        return Err(Error::shape(
            "adamw_step",
            format!("param {:?}, grad {:?}, state {:?}", param.shape(), grad.shape(), state.m.shape()),
        ));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer state for a whole [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    states: Vec<MomentState>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        AdamW { config, step: 0, states: store.values().iter().map(MomentState::zeros_like).collect() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.states.len() != store.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} params, {} grads, {} states", store.len(), grads.len(), self.states.len()),
            ));
        }
        self.step += 1;
        for ((p, g), s) in store.values_mut().iter_mut().zip(grads).zip(&mut self.states) {
            adamw_step(p, g, s, &self.config, lr, self.step)?;
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
