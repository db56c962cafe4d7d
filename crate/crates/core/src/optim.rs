//! AdamW: bias-corrected Adam moments with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &Params<f32>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::param(format!("learning rate must be positive, got {}", config.lr)));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::param("Adam betas must lie in [0, 1)"));
        }
        if config.weight_decay < 0.0 || config.eps <= 0.0 {
            return Err(Error::param("weight decay must be >= 0 and eps > 0"));
        }
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        })
    }

    /// One update. Rejects non-finite gradients before touching any state.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &Params<f32>) -> Result<()> {
        if grads.names() != params.names() {
            return Err(Error::dim("gradient store does not match parameters"));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Divergence {
                step: self.step as usize,
                msg: format!("non-finite gradient in {name}"),
            });
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = (1.0 - c.lr * c.weight_decay) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads.tensors()).enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for (i, (theta, &grad)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad;
                v[i] = b2 * v[i] + (1.0 - b2) * grad * grad;
                let m_hat = m[i] as f64 / bc1;
                let v_hat = v[i] as f64 / bc2;
                let update = c.lr * m_hat / (v_hat.sqrt() + c.eps);
                *theta = *theta * decay - update as f32;
            }
        }
        if !params.all_finite() {
            return Err(Error::Divergence {
                step: self.step as usize,
                msg: "parameters became non-finite".into(),
            });
        }
        Ok(())
    }
}
