//! AdamW with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Optimizer state. Moments are kept in `f64` whatever the parameter
/// precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed update count.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Which parameters receive weight decay.
    pub decay_mask: Vec<bool>,
}

impl AdamW {
    /// Fresh state for `params`; weight decay applies to matrices only.
    pub fn new<T: Scalar>(params: &[Tensor<T>], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            decay_mask: params.iter().map(|p| p.ndim() >= 2).collect(),
        }
    }

    pub fn reset_moments(&mut self) {
        for x in self.m.iter_mut().chain(self.v.iter_mut()) {
            x.fill(0.0);
        }
    }

    /// Zero the moments of one parameter.
    pub fn reset_param(&mut self, i: usize) {
        self.m[i].fill(0.0);
        self.v[i].fill(0.0);
    }

    /// One update with learning rate `lr`.
    ///
    /// `p <- p (1 - lr λ)` then `p <- p - lr m̂ / (sqrt(v̂) + eps)`. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step<T: Scalar>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adamw: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() {
                return Err(Error::shape(format!("adamw: param {i} has {} grads for {} values", g.len(), p.numel())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in parameter {i}")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if self.decay_mask[i] {
                1.0 - lr * self.weight_decay
            } else {
                1.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data.iter_mut().enumerate() {
                let gj = g[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let w = x.as_f64() * decay;
                *x = T::of_f64(w - lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm {
        let scale = T::of_f64(max_norm / (norm + 1e-6));
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
    norm
}
