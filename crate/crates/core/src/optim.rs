//! Adam, global-norm clipping and plateau learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamBundle;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Global L2 norm over a set of gradient tensors.
pub fn global_norm<F: Scalar>(grads: &[&Tensor<F>]) -> F {
    grads.iter().map(|g| g.sq_norm()).sum::<F>().sqrt()
}

/// Rescales the gradients of `params` so their joint norm is at most
/// `threshold`. Returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(params: &mut ParamBundle<F>, threshold: F) -> Result<F> {
    for p in params.iter() {
        if p.grad.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: format!("gradient of {}", p.name) });
        }
    }
    let norm = params.iter().map(|p| p.grad.sq_norm()).sum::<F>().sqrt();
    if norm > threshold {
        let k = threshold / norm;
        for p in params.iter_mut() {
            p.grad.scale(k);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamBundle<F>, lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros(), v: zeros(), step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of every parameter from its gradient slot.
pub fn adam_step<F: Scalar>(params: &mut ParamBundle<F>, state: &mut AdamState<F>) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape("adam_step", format!("{} moment slots for {} parameters", state.m.len(), params.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::lit(state.beta1), F::lit(state.beta2));
    let c1 = F::one() - F::lit(state.beta1.powi(t));
    let c2 = F::one() - F::lit(state.beta2.powi(t));
    let (lr, eps) = (F::lit(state.lr), F::lit(state.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() {
            return Err(Error::shape("adam_step", format!("moment shape for {}", p.name)));
        }
        let g = p.grad.data();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            md[i] = b1 * md[i] + (F::one() - b1) * g[i];
            vd[i] = b2 * vd[i] + (F::one() - b2) * g[i] * g[i];
            let mh = md[i] / c1;
            let vh = vd[i] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub patience: u32,
    pub factor: f64,
    /// relative improvement needed to reset patience
    pub threshold: f64,
    pub floor: f64,
    pub best: f64,
    pub bad_epochs: u32,
}

impl PlateauSchedule {
    pub fn new(lr: f64) -> Self {
        PlateauSchedule { lr, patience: 3, factor: 0.1, threshold: 1e-4, floor: 1e-7, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Feeds one epoch's training loss; returns the learning rate to use next.
    pub fn update(&mut self, loss: f64) -> Result<f64> {
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "epoch loss".into() });
        }
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr = (self.lr * self.factor).max(self.floor.min(self.lr));
                self.bad_epochs = 0;
            }
        }
        Ok(self.lr)
    }
}
