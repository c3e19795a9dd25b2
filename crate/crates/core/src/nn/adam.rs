//! Adam with decoupled weight decay, plus the one-cycle learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::layers::ParamStore;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<Tensor> = (0..store.len())
            .map(|i| Tensor::zeros(store.param_at(i).shape.clone()))
            .collect();
        AdamState {
            m: shapes.clone(),
            v: shapes,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One bias-corrected Adam update at step index `step` (1-based), consuming the
/// gradients currently in the store. Decoupled weight decay is applied as
/// theta <- theta - lr * wd * theta before the moment update.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, step: u64) -> Result<()> {
    if step != state.t + 1 {
        return Err(Error::Numeric(format!(
            "adam step counter not monotone: expected {}, got {step}",
            state.t + 1
        )));
    }
    state.t = step;
    let t = step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for i in 0..store.len() {
        let grad = store.grad_at(i).data.clone();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = store.param_at_mut(i);
        for j in 0..p.data.len() {
            if state.weight_decay != 0.0 {
                p.data[j] -= state.lr * state.weight_decay * p.data[j];
            }
            let g = grad[j];
            m.data[j] = state.beta1 * m.data[j] + (1.0 - state.beta1) * g;
            v.data[j] = state.beta2 * v.data[j] + (1.0 - state.beta2) * g * g;
            let mhat = m.data[j] / bc1;
            let vhat = v.data[j] / bc2;
            p.data[j] -= state.lr * mhat / (vhat.sqrt() + state.eps);
            if !p.data[j].is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite parameter after adam step {step}"
                )));
            }
        }
    }
    Ok(())
}

/// One-cycle schedule: linear warmup from peak/25 to peak over the first 30%
/// of steps, then cosine decay to peak/1e4 at the last step.
pub fn one_cycle_lr(step: u64, total_steps: u64, peak_lr: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let s = (step as f64).min(total);
    let warmup = 0.3 * total;
    let start = peak_lr / 25.0;
    let floor = peak_lr / 1e4;
    if s <= warmup {
        start + (peak_lr - start) * (s / warmup)
    } else {
        let frac = (s - warmup) / (total - warmup);
        floor + (peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
