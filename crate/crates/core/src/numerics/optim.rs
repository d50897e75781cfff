//! AdamW with decoupled weight decay, cosine learning-rate schedule with
//! linear warmup, and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.05 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(&format!("optimizer.{name}"), format!("must be in [0, 1), got {v}")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// AdamW optimizer state: first and second moment per parameter plus a global
/// step counter. Weight decay is decoupled (applied directly to the weights,
/// not mixed into the moment estimates).
pub struct AdamW<S> {
    config: AdamWConfig,
    moment1: BTreeMap<String, Tensor<S>>,
    moment2: BTreeMap<String, Tensor<S>>,
    step_count: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, moment1: BTreeMap::new(), moment2: BTreeMap::new(), step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update. Parameters without a gradient entry are left
    /// untouched; gradients for unknown parameters are a contract error.
    pub fn step(
        &mut self,
        params: &mut ParamSet<S>,
        grads: &BTreeMap<String, Tensor<S>>,
        lr: f64,
    ) -> Result<()> {
        for name in grads.keys() {
            if !params.contains(name) {
                return Err(Error::contract(format!("gradient for unknown parameter {name:?}")));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let c = &self.config;
        // Bias corrections in f64: beta1^t underflows f32 long before the
        // schedule ends.
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let (one_m_b1, one_m_b2) = (S::from_f64(1.0 - c.beta1), S::from_f64(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (S::from_f64(1.0 / bc1), S::from_f64(1.0 / bc2));
        let eps = S::from_f64(c.eps);
        let lr_s = S::from_f64(lr);
        let decay = S::from_f64(lr * c.weight_decay);

        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            if grad.shape() != param.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient {:?} vs parameter {:?} for {name:?}", grad.shape(), param.shape()),
                ));
            }
            let m = self
                .moment1
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let v = self
                .moment2
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for ((p, &g), (m, v)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *p = *p - decay * *p - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine learning-rate schedule with linear warmup.
///
/// Step 0 yields 0; the rate rises linearly to `max_lr` at `warmup_steps`,
/// then follows half a cosine down to 0 at `total_steps`. Steps past the end
/// stay clamped at the final value.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(max_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if max_lr <= 0.0 {
            return Err(Error::config("schedule.max_lr", "must be positive"));
        }
        if warmup_steps >= total_steps {
            return Err(Error::config(
                "schedule.warmup_steps",
                format!("warmup ({warmup_steps}) must be smaller than total steps ({total_steps})"),
            ));
        }
        Ok(LrSchedule { max_lr, warmup_steps, total_steps })
    }

    /// Learning rate at a zero-based step index.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.max_lr * step as f64 / self.warmup_steps as f64;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let progress = progress.min(1.0);
        self.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients<S: Scalar>(grads: &mut BTreeMap<String, Tensor<S>>, max_norm: f64) -> f64 {
    let mut sq_sum = 0.0f64;
    for g in grads.values() {
        sq_sum += g.data().iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>();
    }
    let norm = sq_sum.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
