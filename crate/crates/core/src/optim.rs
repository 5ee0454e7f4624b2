//! Decoupled-weight-decay adaptive moment optimizer and the warmup/cosine
//! learning rate schedule. Optimizer state exists only for trainable
//! parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub start_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Color-permutation augmentation with matching caption rewrites.
    pub augment: bool,
    /// Std of Gaussian pixel noise (0..1 scale) added to training frames.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            max_lr: 1e-4,
            min_lr: 1e-5,
            start_lr: 1e-6,
            warmup_steps: 100,
            total_steps: 1000,
            weight_decay: 0.05,
            batch_size: 8,
            augment: true,
            pixel_noise: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.start_lr <= self.min_lr && self.min_lr <= self.max_lr) {
            return Err(Error::Config(format!(
                "need start_lr <= min_lr <= max_lr, got {} / {} / {}",
                self.start_lr, self.min_lr, self.max_lr
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} must be shorter than the {}-step run",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size of zero".into()));
        }
        if !(0.0..=1.0).contains(&self.pixel_noise) {
            return Err(Error::Config(format!(
                "pixel noise {} outside [0, 1]",
                self.pixel_noise
            )));
        }
        Ok(())
    }
}

/// Linear ramp start_lr -> max_lr over the warmup, then cosine decay
/// max_lr -> min_lr. Continuous at the boundary and nonincreasing after.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(Error::Contract(format!(
            "step {} beyond total_steps {}",
            step, cfg.total_steps
        )));
    }
    if step <= cfg.warmup_steps {
        let t = if cfg.warmup_steps == 0 {
            1.0
        } else {
            step as f64 / cfg.warmup_steps as f64
        };
        return Ok(cfg.start_lr + (cfg.max_lr - cfg.start_lr) * t);
    }
    let t = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos()))
}

pub struct AdamW {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, weight_decay: f64) -> Result<AdamW> {
        for p in &params {
            if !p.requires_grad() {
                return Err(Error::Contract(
                    "optimizer handed a non-trainable parameter".into(),
                ));
            }
        }
        let m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Ok(AdamW {
            params,
            m,
            v,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay,
            t: 0,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update. Parameters without an accumulated gradient this step are
    /// treated as having a zero gradient (weight decay still applies).
    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update_data(|data| {
                for j in 0..data.len() {
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    data[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[j]);
                }
            });
        }
    }
}
