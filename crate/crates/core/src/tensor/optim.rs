//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_start: 5e-3,
            lr_end: 5e-7,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            total_steps: 1,
        }
    }
}

impl AdamWConfig {
    /// Cosine decay from `lr_start` at step 0 to `lr_end` at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = (step.min(self.total_steps) as f64) / (self.total_steps.max(1) as f64);
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (PI * t).cos())
    }
}

/// Moment buffers for a fixed, ordered parameter list.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
    decay: Vec<bool>,
    names: Vec<String>,
}

impl<T: Scalar> OptimizerState<T> {
    /// `params` gives each parameter's name, length and whether weight decay
    /// applies to it.
    pub fn new(config: AdamWConfig, params: &[(String, usize, bool)]) -> Self {
        OptimizerState {
            config,
            m: params.iter().map(|p| vec![T::zero(); p.1]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.1]).collect(),
            step: 0,
            decay: params.iter().map(|p| p.2).collect(),
            names: params.iter().map(|p| p.0.clone()).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// One update. Gradients are checked for finiteness before any parameter
    /// is touched; a `None` gradient is treated as zero.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&[T]>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} params, {} grads, {} slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.len() != self.m[i].len() || params[i].numel() != self.m[i].len() {
                return Err(Error::shape("adamw", format!("parameter {}", self.names[i])));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}[{j}] = {}", self.names[i], g[j])));
            }
        }

        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);

        for (i, p) in params.iter_mut().enumerate() {
            let shrink = if self.decay[i] { T::of(1.0 - lr * c.weight_decay) } else { T::one() };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let gj = grads[i].map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                data[j] = data[j] * shrink - step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
