use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

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

/// Moment estimates for every parameter of a [`ParamStore`], in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. `grads` follows store order. A NaN
    /// gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() || grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len()) {
            return Err(Error::Shape("gradient list does not match parameters".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| v.is_nan()) {
                return Err(Error::NanGradient(params.name(i).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.tensor_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
