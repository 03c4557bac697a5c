//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub t: u64,
}

pub fn adam_init(params: &ParamSet<f32>) -> AdamState {
    AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if !params.same_layout(grads) {
        return Err(Error::shape("gradients do not match the parameter layout"));
    }
    if !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(Error::shape("optimizer state does not match the parameter layout"));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1f, b2f) = (b1 as f32, b2 as f32);

    let layers = params.iter_mut().zip(grads.iter()).zip(state.m.iter_mut().zip(state.v.iter_mut()));
    for (((_, p), (_, g)), ((_, m), (_, v))) in layers {
        let values = p.values_mut().zip(g.values()).zip(m.values_mut().zip(v.values_mut()));
        for ((theta, &g), (m, v)) in values {
            *m = b1f * *m + (1.0 - b1f) * g;
            *v = b2f * *v + (1.0 - b2f) * g * g;
            let m_hat = *m as f64 / c1;
            let v_hat = *v as f64 / c2;
            *theta -= (hyper.lr * m_hat / (v_hat.sqrt() + hyper.epsilon)) as f32;
        }
    }
    Ok(())
}
