//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, LtdError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self> {
        if !(config.lr >= 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(LtdError::Config(format!("invalid Adam config {config:?}")));
        }
        if !(config.eps > 0.0) {
            return Err(LtdError::Config("Adam eps must be > 0".into()));
        }
        Ok(AdamState {
            config,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// One update over `params` using the gradients stored on them.
    /// Parameters with no stored gradient are treated as having zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>]) -> Result<()> {
        if params.len() != self.m.len() {
            return dim_err(format!(
                "Adam state tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return dim_err(format!(
                    "parameter {i}: {} values vs state of {}",
                    p.numel(),
                    self.m[i].len()
                ));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().map(<[f32]>::to_vec);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                let update = lr as f64 * m_hat / (v_hat.sqrt() + eps as f64);
                data[j] = (data[j] as f64 - update) as f32;
            }
            if !data.iter().all(|x| x.is_finite()) {
                return Err(LtdError::Numeric(format!("non-finite parameter {i} after Adam step")));
            }
        }
        Ok(())
    }
}
