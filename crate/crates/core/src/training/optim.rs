//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: ADAM_EPS, weight_decay: 0.05 }
    }
}

/// First and second moments per parameter plus the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(params: &BTreeMap<String, Tensor>) -> Self {
        let zeros: BTreeMap<_, _> = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec()))).collect();
        OptimizerState { step: 0, m: zeros.clone(), v: zeros }
    }

    fn check(&self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in params {
            let (m, v) = match (self.m.get(name), self.v.get(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::invalid(format!("optimizer has no moments for {name}"))),
            };
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::shape("adamw_step", &[p.shape(), m.shape(), v.shape()]));
            }
        }
        Ok(())
    }
}

/// MAE convention: biases, norm parameters, positional embeddings and mask
/// tokens are not decayed.
pub fn default_decay(name: &str, t: &Tensor) -> bool {
    t.rank() >= 2 && !name.ends_with(".pos") && !name.ends_with("mask_token")
}

/// One AdamW update of every entry of `params`.
///
/// All gradients are checked for finiteness before anything is modified, so
/// a NaN leaves parameters and state untouched.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamWConfig,
    decay: impl Fn(&str, &Tensor) -> bool,
) -> Result<()> {
    state.check(params)?;
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adamw_step", &[p.shape(), g.shape()]));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { what: format!("gradient of {name}") });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let wd = if decay(name, p) { hp.weight_decay } else { 0.0 };
        let m = state.m.get_mut(name).unwrap().data_mut();
        let v = state.v.get_mut(name).unwrap().data_mut();
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + wd * *theta);
        }
    }
    Ok(())
}
