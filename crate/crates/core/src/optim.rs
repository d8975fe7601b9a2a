// SPDX-License-Identifier: MIT OR Apache-2.0

//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descent step on `params`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c = &self.cfg;
        let b1t = 1.0 - c.beta1.powi(self.t);
        let b2t = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
}

/// Stochastic gradient descent with momentum, weight decay and a cosine
/// schedule preceded by a constant warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.002,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_steps: 1,
            warmup_lr: 1e-5,
        }
    }
}

impl SgdConfig {
    /// Step size at `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.warmup_lr;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    buf: Vec<f64>,
    started: bool,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, n: usize) -> Self {
        Sgd {
            cfg,
            buf: vec![0.0; n],
            started: false,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        for i in 0..params.len() {
            let g = grad[i] + self.cfg.weight_decay * params[i];
            self.buf[i] = if self.started {
                self.cfg.momentum * self.buf[i] + g
            } else {
                g
            };
            params[i] -= lr * self.buf[i];
        }
        self.started = true;
    }
}

/// Errors with the last finite parameters when `loss` is not finite.
pub fn check_finite(loss: f64, step: usize, last_good: &[f64]) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        log::error!("non-finite loss {loss} at step {step}; last finite parameters: {last_good:?}");
        Err(Error::NumericAbort {
            step,
            last_good: last_good.to_vec(),
        })
    }
}
