//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::{Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Biases, norm affine parameters and mask tokens are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("norm") || name.contains("mask_token"))
}

/// Optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    moments: Vec<(Mat<T>, Mat<T>)>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let moments = store
            .values()
            .iter()
            .map(|v| (Mat::zeros(v.rows, v.cols), Mat::zeros(v.rows, v.cols)))
            .collect();
        Self { config, moments, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched. Fails without modifying anything if a gradient is
    /// not finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradStore<T>, lr: f64) -> Result<()> {
        assert_eq!(grads.grads.len(), store.len(), "gradient store does not match parameters");
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", store.name(i))));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        for i in 0..store.len() {
            let Some(g) = grads.get(i) else { continue };
            if !store.is_trainable(i) {
                continue;
            }
            let decay = if decays(store.name(i)) { T::lit(1.0 - lr * c.weight_decay) } else { T::one() };
            let (m, v) = &mut self.moments[i];
            let p = store.value_mut(i);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = b1 * m.data[k] + one_b1 * gk;
                v.data[k] = b2 * v.data[k] + one_b2 * gk * gk;
                let denom = v.data[k].sqrt() * inv_bc2_sqrt + eps;
                p.data[k] = p.data[k] * decay - step_size * m.data[k] / denom;
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero, over
/// `total_steps` optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl Schedule {
    /// Learning rate at progress `p` in `[0, 1]`.
    pub fn lr_at_progress(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        let w = self.warmup_fraction;
        if p < w {
            self.base_lr * p / w
        } else {
            0.5 * self.base_lr * (1.0 + (PI * (p - w) / (1.0 - w)).cos())
        }
    }

    /// Learning rate for optimizer step `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        self.lr_at_progress(step as f64 / self.total_steps.max(1) as f64)
    }
}
