//! AdamW with decoupled weight decay, cosine learning-rate schedule and
//! global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::model::Params;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments per parameter element, kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<S: Scalar>(params: &Params<S>) -> Self {
        let zeros = || params.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update at learning rate `lr`. Weight decay applies to matrices
/// and kernels (rank >= 2) only.
pub fn adamw_step<S: Scalar>(
    params: &mut Params<S>,
    grads: &[Tensor<S>],
    state: &mut AdamState,
    opt: &AdamW,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - opt.beta1.powi(t), 1.0 - opt.beta2.powi(t));
    for (i, (p, g)) in params.values_mut().iter_mut().zip(grads).enumerate() {
        let decay = if p.rank() >= 2 { opt.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv.as_f64();
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * gv;
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * gv * gv;
            let (mh, vh) = (m[j] / c1, v[j] / c2);
            let x = pv.as_f64();
            *pv = S::cast(x - lr * decay * x - lr * mh / (vh.sqrt() + opt.eps));
        }
    }
}

/// Linear warmup to `base` over `warmup` epochs, then cosine decay to zero
/// at `total` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub warmup: f64,
    pub total: f64,
}

impl CosineSchedule {
    /// Learning rate at a fractional epoch position.
    pub fn at(&self, epoch: f64) -> f64 {
        if epoch < self.warmup {
            self.base * epoch / self.warmup
        } else if epoch >= self.total {
            0.0
        } else {
            let p = (epoch - self.warmup) / (self.total - self.warmup);
            0.5 * self.base * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::cast(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
