//! Adam with bias correction and a linear warm-up / linear decay schedule.

use serde::{Deserialize, Serialize};

use crate::encoder::ParamStore;
use crate::error::{Error, Result};

/// `lr(t) = base * t / W` for `t <= W`, then linear decay reaching 0 at
/// `t = total`. Steps are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    /// Warm-up over `fraction` of `total_steps` (at least one step).
    pub fn new(base_lr: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        let warmup_steps = ((warmup_fraction * total_steps as f64).round() as usize).max(1);
        Self { base_lr, warmup_steps, total_steps }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = step as f64;
        let w = self.warmup_steps as f64;
        if step <= self.warmup_steps {
            self.base_lr * t / w
        } else if step >= self.total_steps {
            0.0
        } else {
            self.base_lr * (self.total_steps - step) as f64 / (self.total_steps as f64 - w)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: usize,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        Self { config, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// One update at learning rate `lr`. Gradients are checked for finiteness
    /// before anything is modified. Parameters and moments are rounded to
    /// `f32` afterwards.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        for g in grads.tensors() {
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(g.name.clone()));
            }
        }
        for (p, g) in params.tensors().into_iter().zip(grads.tensors()) {
            if p.shape != g.shape {
                return Err(Error::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.shape.clone(),
                    found: g.shape.clone(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                let mi = (beta1 * m.data[i] + (1.0 - beta1) * gi) as f32 as f64;
                let vi = (beta2 * v.data[i] + (1.0 - beta2) * gi * gi) as f32 as f64;
                m.data[i] = mi;
                v.data[i] = vi;
                let mhat = if bc1 > 0.0 { mi / bc1 } else { mi };
                let vhat = if bc2 > 0.0 { vi / bc2 } else { vi };
                let update = lr * mhat / (vhat.sqrt() + eps);
                p.data[i] = (p.data[i] - update) as f32 as f64;
            }
        }
        Ok(())
    }
}
