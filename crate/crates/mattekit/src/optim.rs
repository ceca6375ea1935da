//! SGD with momentum plus the polynomial learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{MatteError, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

/// base_lr * (1 - iter/max_iters)^power. Defined for 0 <= iter <= max_iters,
/// reaching exactly 0 at the end.
pub fn poly_lr(iter: usize, max_iters: usize, base_lr: f64, power: f64) -> Result<f64> {
    if iter > max_iters {
        return Err(MatteError::invalid(
            "poly_lr",
            format!("iter {iter} exceeds max_iters {max_iters}"),
        ));
    }
    let frac = 1.0 - iter as f64 / max_iters as f64;
    Ok(base_lr * frac.powf(power))
}

/// Heavy-ball SGD. Per parameter: v <- momentum*v + grad + weight_decay*p,
/// then p <- p - lr*v, so the decay couples into the momentum buffer.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Sgd {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    /// Applies one update to every named gradient. Gradient shapes must match
    /// their parameters. With lr = 0 the parameters are left untouched while
    /// the momentum buffer still absorbs the gradient.
    pub fn step(&mut self, params: &mut Params, grads: &[(String, Tensor)], lr: f64) {
        for (name, grad) in grads {
            let param = params.get_mut(name);
            assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch for {name}");
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            let p = param.data_mut();
            let g = grad.data();
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] + g[i] + self.weight_decay * p[i];
                p[i] -= lr * v[i];
            }
        }
    }

    /// Momentum buffers in name order, for checkpointing.
    pub fn velocity(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Vec<f64>>) {
        self.velocity = velocity;
    }
}
