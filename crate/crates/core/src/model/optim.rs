use serde::{Deserialize, Serialize};

use super::params::Params;

/// Adam with linear warmup to a constant learning rate and optional global
/// gradient-norm clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Clip the global gradient L2 norm to this value; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup_steps: 20,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: OptimConfig,
    m: Params,
    v: Params,
    step: u64,
}

impl Adam {
    pub fn new(config: OptimConfig, like: &Params) -> Self {
        Self {
            config,
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let c = &self.config;
        if c.warmup_steps == 0 || step >= c.warmup_steps {
            c.lr
        } else {
            c.lr * (step + 1) as f64 / c.warmup_steps as f64
        }
    }

    /// Applies one update and rounds parameters onto the f32 grid.
    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        let c = self.config.clone();
        let lr = self.lr_at(self.step);
        self.step += 1;
        let scale = match c.grad_clip {
            Some(max) => {
                let norm = grads
                    .tensors
                    .iter()
                    .flat_map(|t| &t.data)
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i] * scale;
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        params.round_to_f32();
    }
}
