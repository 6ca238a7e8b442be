use serde::{Deserialize, Serialize};

use super::{EncoderParams, GradientSet, PARAM_NAMES};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter used for bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            m: params.zero_grad(),
            v: params.zero_grad(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is mutated if any gradient entry
/// is non-finite.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &GradientSet,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.shapes() != grads.shapes() || params.shapes() != state.m.shapes() {
        return Err(Error::Shape(
            "gradient or optimizer state does not match parameters".into(),
        ));
    }
    for (name, g) in PARAM_NAMES.iter().zip(grads.tensors()) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: (*name).to_string(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (config.beta1, config.beta2);

    let grads = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}
