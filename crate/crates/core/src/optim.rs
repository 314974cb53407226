//! Adam with inverse-square-root warmup and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::param::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 3e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push("optim.learning_rate: must be a positive finite number".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("optim.{name}: must lie in [0, 1)"));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            out.push("optim.eps: must be positive".into());
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            out.push("optim.clip_norm: must be a non-negative finite number".into());
        }
        out
    }

    /// Learning rate at 1-based `step`: linear warmup, then `∝ 1/√step`.
    pub fn rate(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        let w = self.warmup_steps as f64;
        self.learning_rate * (s / w).min((w / s).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: OptimConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.tensor.len()])
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one update from the accumulated gradients and returns the
    /// pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        self.step += 1;
        let norm = store.grad_norm();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let c = &self.config;
        let lr = c.rate(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data();
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                data[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
        norm
    }
}
