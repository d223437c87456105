use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    config: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 / (1.0 - b1.powi(t));
    let c2 = 1.0 / (1.0 - b2.powi(t));
    let decay = T::from_f64(1.0 - lr * config.weight_decay);
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let (c1, c2, lr_t, eps) = (T::from_f64(c1), T::from_f64(c2), T::from_f64(lr), T::from_f64(config.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((pv, &gv), (mv, vv)) in it {
            *mv = b1t * *mv + one_b1 * gv;
            *vv = b2t * *vv + one_b2 * gv * gv;
            let mh = *mv * c1;
            let vh = *vv * c2;
            *pv = *pv * decay - lr_t * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let x = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Global L2 norm of `grads`.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` to norm `max_norm` when above it. Returns the norm
/// before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v = *v * s));
    }
    norm
}
