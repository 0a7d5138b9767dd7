use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::Param;
use super::real::Real;
use super::tensor::Tensor;

/// Adam hyperparameters. The defaults are the common convention; nothing
/// more specific is prescribed for this model family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound applied before each update; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            clip_norm: 10.0,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shape: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if param.shape() != grad.shape()
        || state.m.shape() != param.shape()
        || state.v.shape() != param.shape()
    {
        return Err(Error::shape(
            "adam_step",
            format!("param {:?}, grad {:?}", param.shape(), grad.shape()),
        ));
    }
    if lr < 0.0 {
        return Err(Error::InvalidInput(format!("negative learning rate {lr}")));
    }
    grad.check_finite("adam gradient")?;

    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let bc1 = T::lit(1.0 - state.beta1.powi(t));
    let bc2 = T::lit(1.0 - state.beta2.powi(t));
    let lr = T::lit(lr);
    let eps = T::lit(state.eps);
    let one = T::one();
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.data_mut())
        .zip(state.v.data_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a named parameter set, with global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub states: BTreeMap<String, AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: BTreeMap::new(),
        }
    }

    /// Clips, then updates every parameter accepted by `trainable`.
    /// Returns the pre-clip gradient norm over the trainable set.
    pub fn step(
        &mut self,
        params: Vec<(String, &mut Param<T>)>,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<f64> {
        let mut active: Vec<(String, &mut Param<T>)> =
            params.into_iter().filter(|(n, _)| trainable(n)).collect();
        let norm = super::params::clip_grad_norm(&mut active, self.config.clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        for (name, p) in active {
            let cfg = self.config;
            let state = self
                .states
                .entry(name)
                .or_insert_with(|| AdamState::new(p.value.shape(), cfg.beta1, cfg.beta2, cfg.eps));
            adam_step(&mut p.value, &p.grad, state, lr)?;
        }
        Ok(norm)
    }
}
