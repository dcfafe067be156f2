//! SGD and Adam update rules shared by perturbative and backprop training.

use crate::error::{check_len, Error, Result};
use crate::param_space::{OptimizerConfig, OptimizerKind};

/// Mutable optimizer state. Adam keeps first/second moments and a step counter.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Sgd => OptimizerKind::Sgd,
            OptimizerState::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, theta: &mut [f64], update: &[f64], config: &OptimizerConfig) -> Result<()> {
        check_len("optimizer update", theta.len(), update.len())?;
        match self {
            OptimizerState::Sgd => {
                for (p, g) in theta.iter_mut().zip(update) {
                    *p -= config.learning_rate * g;
                }
                Ok(())
            }
            OptimizerState::Adam { m, v, t } => {
                check_len("adam moments", theta.len(), m.len())?;
                *t += 1;
                let step = *t;
                let (b1, b2) = (config.beta1, config.beta2);
                let bias1 = 1.0 - b1.powf(step as f64);
                let bias2 = 1.0 - b2.powf(step as f64);
                for i in 0..theta.len() {
                    let g = update[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    if !(m[i].is_finite() && v[i].is_finite()) {
                        return Err(Error::NonFiniteOptimizerState { step });
                    }
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    theta[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
                }
                Ok(())
            }
        }
    }

    /// Counts a step without moving anything (used for all-zero directions).
    pub fn tick(&mut self) {
        if let OptimizerState::Adam { t, .. } = self {
            *t += 1;
        }
    }
}

/// `theta - learning_rate * update`.
pub fn sgd_step(theta: &[f64], update: &[f64], learning_rate: f64) -> Result<Vec<f64>> {
    let mut out = theta.to_vec();
    OptimizerState::Sgd.step(&mut out, update, &OptimizerConfig::sgd(learning_rate))?;
    Ok(out)
}

/// One bias-corrected Adam step; returns the new parameters and state.
pub fn adam_step(
    theta: &[f64],
    update: &[f64],
    state: &OptimizerState,
    config: &OptimizerConfig,
) -> Result<(Vec<f64>, OptimizerState)> {
    if !matches!(state, OptimizerState::Adam { .. }) {
        return Err(Error::InvalidConfig("adam_step needs Adam state".into()));
    }
    let mut out = theta.to_vec();
    let mut next = state.clone();
    next.step(&mut out, update, config)?;
    Ok((out, next))
}
