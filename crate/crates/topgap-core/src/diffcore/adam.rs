//! Adam with bias correction over named parameter maps.

use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Adam hyperparameters. Defaults are the usual 1e-3 / 0.9 / 0.999 / 1e-8.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("adam lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam {name} must be in [0,1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First/second moment buffers keyed by parameter name, plus the step count.
#[derive(Clone, Debug, Default)]
pub struct AdamState<F: Scalar> {
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
        }
    }
}

/// One Adam update over every parameter in `params`. Each parameter must
/// have an entry in `grads` of matching length; a missing or misshapen
/// gradient is a state error naming the parameter. Zero gradients leave
/// values unchanged while still advancing the step counter.
pub fn adam_step<F: Scalar>(
    params: &mut BTreeMap<String, Tensor<F>>,
    grads: &BTreeMap<String, Vec<F>>,
    state: &mut AdamState<F>,
    hyper: &AdamHyper,
) -> Result<()> {
    hyper.validate()?;
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::of_f64(hyper.beta1);
    let b2 = F::of_f64(hyper.beta2);
    let lr = F::of_f64(hyper.lr);
    let eps = F::of_f64(hyper.eps);
    let c1 = F::one() - F::of_f64(hyper.beta1.powi(t));
    let c2 = F::one() - F::of_f64(hyper.beta2.powi(t));

    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| {
            Error::State(format!("adam_step: missing gradient for parameter '{name}'"))
        })?;
        if g.len() != p.numel() {
            return Err(Error::State(format!(
                "adam_step: gradient for '{name}' has {} entries, parameter has {}",
                g.len(),
                p.numel()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![F::zero(); g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![F::zero(); g.len()]);
        if m.len() != g.len() || v.len() != g.len() {
            return Err(Error::State(format!(
                "adam_step: stale optimizer state for '{name}'"
            )));
        }
        let data = p.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (F::one() - b1) * g[i];
            v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
