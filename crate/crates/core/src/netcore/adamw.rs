use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{GradBuffer, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay:
///
/// ```text
/// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
/// m̂ = m/(1−β₁ᵗ)            v̂ = v/(1−β₂ᵗ)
/// θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &ModelParams) -> Self {
        AdamWState {
            config,
            first_moment: ModelParams::zeros(&params.dims),
            second_moment: ModelParams::zeros(&params.dims),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradBuffer) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.first_moment) {
            return Err(Error::Dimension(
                "optimizer, parameter and gradient shapes differ".into(),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::Divergence {
                epoch: None,
                reason: "non-finite gradient".into(),
            });
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first_moment.tensors_mut())
            .zip(self.second_moment.tensors_mut());
        for (((theta, g), m), v) in tensors {
            for i in 0..theta.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[i]);
            }
        }
        Ok(())
    }
}
