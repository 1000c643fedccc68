//! Adam and the warmup + cosine learning-rate curve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// `total`. Steps are 1-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak: f64, warmup_ratio: f64, total: usize) -> Self {
        let warmup = ((warmup_ratio * total as f64).ceil() as usize).min(total);
        Self { peak, warmup, total }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup && self.warmup > 0 {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, slots: BTreeMap::new() }
    }

    /// Advances the step counter; call once per update before [`apply`](Self::apply).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates `param` in place from `grad` at learning rate `lr`.
    pub fn apply(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) {
        let c = self.cfg;
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..param.len() {
            let g = grad[i] + c.weight_decay * param[i];
            slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
            slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
            let mh = slot.m[i] / bc1;
            let vh = slot.v[i] / bc2;
            param[i] -= lr * mh / (vh.sqrt() + c.eps);
        }
    }
}
