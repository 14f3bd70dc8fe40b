//! Adam over flat `f32` parameter vectors with `f64` gradients and moments.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f64]) {
        let lr = self.config.lr;
        self.step_split(params, grad, 0, lr);
    }

    /// Like `step`, but the first `head` parameters use `head_lr`.
    pub fn step_split(&mut self, params: &mut [f32], grad: &[f64], head: usize, head_lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (((p, &g), m), v)) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v).enumerate() {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let rate = if i < head { head_lr } else { lr };
            let update = rate * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            if update != 0.0 {
                *p = (*p as f64 - update) as f32;
            }
        }
    }
}
