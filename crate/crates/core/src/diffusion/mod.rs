//! Noise schedule, deterministic DDIM sampling and Tweedie estimates.
//!
//! Sampling uses ε-prediction with η = 0: at a retained timestep `t` with
//! predecessor `t'`,
//!
//! ```text
//! x̂₀     = (x_t − √(1 − ᾱ_t) ε̂) / √ᾱ_t
//! x_{t'} = √ᾱ_{t'} x̂₀ + √(1 − ᾱ_{t'}) ε̂
//! ```
//!
//! and the transition out of the last retained timestep targets `ᾱ_0 = 1`,
//! so the sampler ends on `x̂₀`.

mod denoiser;
mod schedule;

pub use denoiser::{Denoiser, GaussianAnalyticDenoiser, GmmAnalyticDenoiser, GmmComponent};
pub use schedule::{
    make_ddim_timesteps, make_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START,
    DEFAULT_TRAIN_STEPS,
};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Shape};
use crate::rng::{standard_normals, stream_rng, Stream};
use crate::scalar::Real;

/// Clean-image estimate implied by a noise prediction. Not clamped.
pub fn tweedie_x0<T: Real>(
    x_t: &ImageTensor<T>,
    eps: &ImageTensor<T>,
    alpha_bar_t: f64,
) -> Result<ImageTensor<T>> {
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0) {
        return Err(Error::invalid(format!(
            "alpha_bar must be in (0, 1], got {alpha_bar_t}"
        )));
    }
    let noise = T::lit((1.0 - alpha_bar_t).sqrt());
    let inv = T::lit(1.0 / alpha_bar_t.sqrt());
    x_t.zip_map(eps, |x, e| (x - noise * e) * inv)
}

/// Deterministic DDIM transition to the timestep with `ᾱ = alpha_bar_prev`.
/// Returns `x̂₀` unchanged when `alpha_bar_prev == 1`.
pub fn ddim_step<T: Real>(
    x_t: &ImageTensor<T>,
    x0hat: &ImageTensor<T>,
    eps: &ImageTensor<T>,
    alpha_bar_prev: f64,
) -> Result<ImageTensor<T>> {
    if !(alpha_bar_prev > 0.0 && alpha_bar_prev <= 1.0) {
        return Err(Error::invalid(format!(
            "alpha_bar_prev must be in (0, 1], got {alpha_bar_prev}"
        )));
    }
    x_t.check_same_shape(x0hat)?;
    x0hat.check_same_shape(eps)?;
    if alpha_bar_prev == 1.0 {
        return Ok(x0hat.clone());
    }
    let a = T::lit(alpha_bar_prev.sqrt());
    let b = T::lit((1.0 - alpha_bar_prev).sqrt());
    let out = x0hat.zip_map(eps, |x, e| a * x + b * e)?;
    if !out.all_finite() {
        return Err(Error::NonFinite("in DDIM step".into()));
    }
    Ok(out)
}

/// Seeded standard-normal starting latent `x_T`.
pub fn initial_latent<T: Real>(shape: Shape, seed: u64) -> Result<ImageTensor<T>> {
    let mut rng = stream_rng(seed, Stream::SamplerInit);
    ImageTensor::from_vec(shape, standard_normals(&mut rng, shape.len()))
}

/// `(t, t_prev)` pairs of a DDIM pass; the final `t_prev` is 0.
pub fn ddim_transitions(num_steps: usize, schedule: &NoiseSchedule) -> Result<Vec<(usize, usize)>> {
    let ts = make_ddim_timesteps(num_steps, schedule.train_steps())?;
    Ok(ts
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
        .collect())
}

/// Guidance-free DDIM sample from `x_T ~ N(0, I)` seeded by `seed`.
pub fn sample_unconditional<T: Real, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    num_steps: usize,
    shape: Shape,
    seed: u64,
) -> Result<ImageTensor<T>> {
    let mut x = initial_latent(shape, seed)?;
    for (t, t_prev) in ddim_transitions(num_steps, schedule)? {
        let eps = denoiser.predict_eps(&x, t)?;
        let x0 = tweedie_x0(&x, &eps, schedule.alpha_bar(t))?;
        x = ddim_step(&x, &x0, &eps, schedule.alpha_bar(t_prev))?;
    }
    Ok(x)
}
