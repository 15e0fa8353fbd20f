//! Adam with bias correction.

use std::collections::BTreeMap;

use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Applies one Adam update to every trainable entry of `params` and advances
/// `state.t`. Nothing is modified when any gradient is non-finite.
pub fn adam_step<T: Element>(
    params: &mut ParameterSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, e) in params.iter() {
        if e.trainable() && !e.grad.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cst::<T>(cfg.beta1), cst::<T>(cfg.beta2));
    let (one_b1, one_b2) = (cst::<T>(1.0 - cfg.beta1), cst::<T>(1.0 - cfg.beta2));
    let bc1 = cst::<T>(1.0 - cfg.beta1.powi(t));
    let bc2 = cst::<T>(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (cst::<T>(lr), cst::<T>(cfg.eps));
    for (name, e) in params.iter_mut() {
        if !e.trainable() {
            continue;
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(e.value.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(e.value.shape()));
        let g = e.grad.data();
        let p = e.value.data_mut();
        for i in 0..p.len() {
            let mi = b1 * m.data()[i] + one_b1 * g[i];
            let vi = b2 * v.data()[i] + one_b2 * g[i] * g[i];
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
