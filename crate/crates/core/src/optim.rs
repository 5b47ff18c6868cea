//! Adaptive-moment optimiser with decoupled weight decay and a linear
//! warmup / linear decay learning-rate schedule.

use crate::numerics::Params;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Learning rate at `step` (0-based) out of `total` steps.
pub fn schedule(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    let total = total.max(1) as f64;
    let warmup = (cfg.warmup_fraction * total).ceil().max(1.0);
    let s = step as f64 + 1.0;
    if s <= warmup {
        cfg.lr * s / warmup
    } else {
        cfg.lr * ((total - s + 1.0) / (total - warmup + 1.0)).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimConfig,
    total_steps: usize,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &Params, total_steps: usize) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            total_steps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        schedule(&self.cfg, self.step, self.total_steps)
    }

    /// Applies the accumulated gradients and clears them.
    pub fn step(&mut self, params: &mut Params) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);

        let clip = if self.cfg.clip_norm > 0.0 {
            let norm = params
                .iter()
                .filter_map(|(_, p)| p.grad())
                .flat_map(|g| g.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > self.cfg.clip_norm {
                self.cfg.clip_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };

        for ((p, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.cfg.eps);
                data[i] -= lr * (update + self.cfg.weight_decay * data[i]);
            }
            p.zero_grad();
        }
    }
}
