use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer accumulators, one buffer per parameter slice.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimState {
    Adam {
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
        step: u64,
    },
    Momentum {
        velocity: Vec<Vec<f64>>,
        step: u64,
    },
}

impl OptimState {
    pub fn adam(lens: &[usize]) -> Self {
        OptimState::Adam {
            first: lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn momentum(lens: &[usize]) -> Self {
        OptimState::Momentum {
            velocity: lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        match self {
            OptimState::Adam { step, .. } | OptimState::Momentum { step, .. } => *step,
        }
    }
}

fn check_shapes(params: &[&mut [f64]], grads: &[&[f64]], acc: &[Vec<f64>]) -> Result<()> {
    if params.len() != grads.len() || params.len() != acc.len() {
        return Err(Error::shape(
            "optimizer parameter groups",
            params.len(),
            format!("{} grads / {} accumulators", grads.len(), acc.len()),
        ));
    }
    for (i, ((p, g), a)) in params.iter().zip(grads).zip(acc).enumerate() {
        if p.len() != g.len() || p.len() != a.len() {
            return Err(Error::shape(
                "optimizer parameter group",
                format!("{} (group {i})", p.len()),
                format!("{} grads / {} accumulator", g.len(), a.len()),
            ));
        }
    }
    Ok(())
}

/// Adam with the L2 penalty `l2 * theta` added to the gradient before the
/// moment updates.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimState,
    lr: f64,
    l2: f64,
    cfg: AdamConfig,
) -> Result<()> {
    let OptimState::Adam {
        first,
        second,
        step,
    } = state
    else {
        return Err(Error::invalid("adam_step needs an Adam optimizer state"));
    };
    check_shapes(params, grads, first)?;
    *step += 1;
    let t = *step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(first.iter_mut())
        .zip(second.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i] + l2 * p[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Heavy-ball SGD: `v <- mu v + (g + l2 theta)`, `theta <- theta - lr v`.
pub fn sgd_momentum_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimState,
    lr: f64,
    momentum: f64,
    l2: f64,
) -> Result<()> {
    let OptimState::Momentum { velocity, step } = state else {
        return Err(Error::invalid(
            "sgd_momentum_step needs a momentum optimizer state",
        ));
    };
    check_shapes(params, grads, velocity)?;
    *step += 1;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for i in 0..p.len() {
            v[i] = momentum * v[i] + g[i] + l2 * p[i];
            p[i] -= lr * v[i];
        }
    }
    Ok(())
}
