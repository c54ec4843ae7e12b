//! Adam with bias correction and a per-step cosine learning-rate decay.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `lr(step) = base · ½(1 + cos(π · step / total))`, clamped at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    schedule: CosineSchedule,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// State with no registered parameters; [`AdamState::init`] must follow.
    pub fn new(config: AdamConfig, total_steps: u64) -> Self {
        AdamState {
            config,
            schedule: CosineSchedule {
                base_lr: config.lr,
                total_steps,
            },
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn init<'a>(mut self, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        for s in shapes {
            self.first.push(Tensor::zeros(s));
            self.second.push(Tensor::zeros(s));
        }
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// One update over all registered parameters, in registration order.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if self.first.is_empty() {
            return Err(Error::UninitializedOptimizer);
        }
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} moment slots, {} params, {} grads",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("slot {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
        }

        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for j in 0..pd.len() {
                md[j] = beta1 * md[j] + (1.0 - beta1) * gd[j];
                vd[j] = beta2 * vd[j] + (1.0 - beta2) * gd[j] * gd[j];
                let mhat = md[j] / c1;
                let vhat = vd[j] / c2;
                pd[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
