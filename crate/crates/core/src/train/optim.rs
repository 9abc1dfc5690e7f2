//! AdamW with decoupled weight decay, and cosine annealing.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{Gradients, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a single tensor. `step` is 1-based.
///
/// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps)) - lr * wd * theta`
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    step: u64,
    cfg: &AdamWConfig,
) {
    debug_assert!(step >= 1);
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps)) + lr * cfg.weight_decay * theta[i];
    }
}

/// Moment buffers for every trainable tensor of a model.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(model: &mut ModelParams, config: AdamWConfig) -> Self {
        let mut m = Vec::new();
        model.visit_trainable_mut(&mut |_, t| m.push(vec![0.0; t.len()]));
        let v = m.clone();
        Self {
            config,
            m,
            v,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        model: &mut ModelParams,
        grads: &Gradients,
        lr: f64,
    ) -> Result<(), TrainError> {
        let mut flat: Vec<Vec<f64>> = Vec::with_capacity(self.m.len());
        grads.visit(&mut |_, g| flat.push(g.to_vec()));
        if flat.len() != self.m.len() {
            return Err(TrainError::OptimizerState);
        }
        self.step += 1;
        let step = self.step;
        let cfg = self.config;
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut mismatch = false;
        model.visit_trainable_mut(&mut |_, theta| {
            if theta.len() != flat[k].len() || theta.len() != ms[k].len() {
                mismatch = true;
            } else {
                adamw_update(theta, &flat[k], &mut ms[k], &mut vs[k], lr, step, &cfg);
            }
            k += 1;
        });
        if mismatch {
            return Err(TrainError::OptimizerState);
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min)(1 + cos(pi step / total)) / 2`
pub fn cosine_anneal_lr(
    step: u64,
    total_steps: u64,
    lr_max: f64,
    lr_min: f64,
) -> Result<f64, TrainError> {
    if step > total_steps {
        return Err(TrainError::ScheduleOutOfRange { step, total_steps });
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}
