//! Adam optimizer over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamId};
use crate::unet::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning-rate multiplier over a fixed number of steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate towards zero.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Multiplier for 0-based `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f32 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                (0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", config.lr)));
        }
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Ok(Self { config, m: zeros(), v: zeros(), steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn lr(&self) -> f32 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    /// One update. Parameters without a gradient are treated as having a zero
    /// gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let id = ParamId(i);
            let g = grads.param(id).map(|g| g.data());
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
