use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Forward-process constants indexed by timestep `t ∈ 1..=T`, with
/// `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Total training timesteps `T`.
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`; `t = 0` yields 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Linear β schedule from `beta_start` to `beta_end` inclusive.
pub fn make_schedule(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if train_steps == 0 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..train_steps)
        .map(|i| {
            if train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(train_steps);
    let mut acc = 1.0f64;
    for &b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// Evenly strided DDIM timesteps, descending from `T`.
///
/// With stride `s = T / num_steps` the sequence is `T, T - s, …` of length
/// `num_steps`. The transition out of the last retained step targets
/// `ᾱ_0 = 1`.
pub fn make_ddim_timesteps(num_steps: usize, train_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > train_steps {
        return Err(Error::invalid(format!(
            "DDIM steps must be in 1..={train_steps}, got {num_steps}"
        )));
    }
    let stride = train_steps / num_steps;
    Ok((0..num_steps).map(|i| train_steps - i * stride).collect())
}
