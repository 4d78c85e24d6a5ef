//! Momentum SGD over named parameter groups with per-group learning rates
//! and decoupled-by-name momentum buffers (checkpointable).

use std::collections::BTreeMap;

use crate::nets::{NamedParam, ParamGroup};
use crate::scalar::Scalar;

pub fn poly_lr(base: f64, iter: usize, total: usize, power: f64) -> f64 {
    assert!(iter <= total && total > 0);
    base * (1.0 - iter as f64 / total as f64).powf(power)
}

#[derive(Debug, Clone)]
pub struct Sgd<S: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling, 0 disables. The desk net has no
    /// normalization layers, so reconstruction errors occasionally produce
    /// heavy-tailed gradients that momentum would otherwise amplify into
    /// divergence.
    pub clip_norm: f64,
    /// Momentum buffer per parameter name; absent until first gradient.
    pub buffers: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64, weight_decay: f64, clip_norm: f64) -> Self {
        Sgd { momentum, weight_decay, clip_norm, buffers: BTreeMap::new() }
    }

    /// Rescale factor bringing the joint gradient norm under the ceiling;
    /// 1.0 when clipping is off or the norm is already below it.
    fn clip_scale(&self, params: &[NamedParam<S>]) -> f64 {
        if self.clip_norm <= 0.0 {
            return 1.0;
        }
        let mut sq = 0.0;
        for p in params {
            if let Some(grad) = p.tensor.grad() {
                sq += grad.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        }
    }

    /// One update: v <- momentum v + (g + wd w); w <- w - lr v, with g
    /// jointly rescaled to the clip ceiling first. Parameters without a
    /// gradient this step are untouched (structurally frozen paths). Weight
    /// decay applies only where the parameter opts in.
    pub fn step(&mut self, params: &[NamedParam<S>], lr_main: f64, lr_pid: f64) {
        let mu = S::from_f64_lossy(self.momentum);
        let scale = S::from_f64_lossy(self.clip_scale(params));
        for p in params {
            let Some(grad) = p.tensor.grad() else { continue };
            let lr = match p.group {
                ParamGroup::Main => lr_main,
                ParamGroup::Pid => lr_pid,
            };
            let lr = S::from_f64_lossy(lr);
            let wd = if p.decay { S::from_f64_lossy(self.weight_decay) } else { S::zero() };
            let buf = self
                .buffers
                .entry(p.name.clone())
                .or_insert_with(|| vec![S::zero(); grad.len()]);
            p.tensor.apply(|w| {
                for i in 0..w.len() {
                    let g = scale * grad[i] + wd * w[i];
                    buf[i] = mu * buf[i] + g;
                    w[i] -= lr * buf[i];
                }
            });
        }
    }
}
