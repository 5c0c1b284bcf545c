//! Momentum SGD and the step learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{math, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 1e-4, grad_clip: Some(10.0) }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup followed by step decay at fixed epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub initial: f64,
    /// Epochs (0-based) at whose start the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub warmup_iters: usize,
    /// Rate at iteration 0 as a fraction of the scheduled rate.
    pub warmup_ratio: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: 0.04, decay_epochs: vec![16, 22], decay_factor: 0.1, warmup_iters: 50, warmup_ratio: 0.1 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0) || !self.initial.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Same schedule with the initial rate scaled.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { initial: self.initial * factor, ..self.clone() }
    }

    pub fn rate(&self, epoch: usize, iteration: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        let base = self.initial * math::powi(self.decay_factor, decays as i32);
        if iteration < self.warmup_iters {
            let frac = iteration as f64 / self.warmup_iters as f64;
            base * (self.warmup_ratio + (1.0 - self.warmup_ratio) * frac)
        } else {
            base
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(config: SgdConfig, param_count: usize) -> Self {
        Self { config, velocity: vec![0.0; param_count] }
    }

    /// Applies one update and returns the (pre-clipping) gradient norm.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) -> f64 {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grads.len(), self.velocity.len());
        let norm = math::sqrt(grads.iter().map(|&g| g as f64 * g as f64).sum());
        let scale = match self.config.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        } as f32;
        let mu = self.config.momentum as f32;
        let wd = self.config.weight_decay as f32;
        let lr = lr as f32;
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            let d = g * scale + wd * *p;
            *v = mu * *v + d;
            *p -= lr * *v;
        }
        norm
    }
}
