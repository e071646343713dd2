use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamMoments {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment state with bias correction. Minimizes: the update
/// moves against `grad`.
#[derive(Debug, Clone)]
pub struct AdamState {
    moments: AdamMoments,
    step: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize, moments: AdamMoments) -> Self {
        Self { moments, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }
}

pub fn apply_update(state: &mut AdamState, params: &PolicyParams, grad: &[f64], lr: f64) -> Result<PolicyParams> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient has {} entries, params {}, optimizer {}",
            grad.len(),
            params.len(),
            state.m.len()
        )));
    }
    let AdamMoments { beta1, beta2, eps } = state.moments;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let mut next = params.clone();
    for (i, w) in next.weights_mut().iter_mut().enumerate() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    if let Some(i) = next.weights().iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFiniteValue(format!("parameter {i} after update")));
    }
    Ok(next)
}
