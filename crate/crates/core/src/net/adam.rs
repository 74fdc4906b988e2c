use serde::{Deserialize, Serialize};

use crate::error::{FluxError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(FluxError::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Bias-corrected Adam update of one tensor at step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], cfg: &AdamConfig, t: u64) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for k in 0..param.len() {
        let g = grad[k];
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[k] / c1;
        let v_hat = v[k] / c2;
        param[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, tensor_lens: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            first: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One optimizer step over all tensors. A non-finite gradient leaves
    /// parameters, moments and the step counter untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(FluxError::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[k].len() || g.len() != self.first[k].len() {
                return Err(FluxError::Contract(format!("tensor {k} changed shape")));
            }
        }
        if let Some(k) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(FluxError::Numeric(format!("non-finite gradient in tensor {k}; step skipped")));
        }
        self.step += 1;
        for (k, p) in params.iter_mut().enumerate() {
            adam_update(p, grads[k], &mut self.first[k], &mut self.second[k], &self.cfg, self.step);
        }
        Ok(())
    }
}
