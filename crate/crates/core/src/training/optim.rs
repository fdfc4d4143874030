//! AdamW with linear warm-up and step decay.

use serde::{Deserialize, Serialize};

use crate::nn::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the learning rate ramps linearly from `lr/warmup` to `lr`.
    pub warmup_steps: usize,
    /// Multiply the learning rate by `decay_factor` every this many steps.
    pub decay_every: Option<usize>,
    pub decay_factor: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 0,
            decay_every: None,
            decay_factor: 0.1,
        }
    }
}

impl AdamWConfig {
    /// Learning rate used at (1-based) step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (t as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decays = self.decay_every.and_then(|e| t.checked_div(e)).unwrap_or(0);
        self.lr * warm * self.decay_factor.powi(decays as i32)
    }
}

/// Moment estimates aligned with the parameter store's order.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (_, value, grad)) in store.values_and_grads_mut().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                if lr == 0.0 {
                    continue;
                }
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
    }
}
