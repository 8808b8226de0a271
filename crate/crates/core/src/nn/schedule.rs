use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup followed by cosine annealing to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::invalid(format!(
                "base_lr {base_lr} must be finite and >= 0"
            )));
        }
        if total_steps <= warmup_steps {
            return Err(Error::invalid(format!(
                "total_steps ({total_steps}) must exceed warmup_steps ({warmup_steps})"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }
}

pub fn cosine_lr(cfg: &ScheduleConfig, step: u64) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::invalid(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.base_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok((cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0))
}
