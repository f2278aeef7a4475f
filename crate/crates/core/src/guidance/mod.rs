//! Multi-step manifold-preserving guidance.
//!
//! Within every DDIM timestep the Tweedie estimate `x̂₀` is refined by `m`
//! projected gradient steps on the data-fidelity loss
//! `L(x̂₀) = ½‖y − A x̂₀‖²`:
//!
//! ```text
//! x̂₀ ← P(x̂₀ − ρ Aᵀ(A x̂₀ − y))
//! ```
//!
//! In budget mode `ρ = g / (m L̂)` where `L̂` estimates the largest
//! eigenvalue of `AᵀA`, so the total step per timestep does not grow with
//! `m` and every step is a descent step when `g < 2m`. Raw mode uses
//! `ρ = g` directly. The refined estimate replaces `x̂₀` in the DDIM update;
//! the noise prediction is left untouched.

mod projector;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use projector::{
    train_pca_projector, IdentityProjector, ManifoldProjector, PcaProjector, PROJECTOR_MAGIC,
};

use crate::diffusion::{
    ddim_step, ddim_transitions, initial_latent, tweedie_x0, Denoiser, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::operators::{operator_norm, LinearOperator};
use crate::scalar::Real;

/// Power iterations used by [`restore`] to estimate `L̂`.
pub const NORM_ITERS: usize = 200;
/// Seed of the power iteration used by [`restore`]. Fixed so that `L̂` and
/// hence the step size are identical for every image of a run.
pub const NORM_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    /// `ρ = g / (m L̂)`
    #[default]
    Budget,
    /// `ρ = g`
    Raw,
}

impl fmt::Display for StepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepMode::Budget => "budget",
            StepMode::Raw => "raw",
        })
    }
}

impl FromStr for StepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "budget" => Ok(StepMode::Budget),
            "raw" => Ok(StepMode::Raw),
            other => Err(Error::invalid(format!(
                "unknown step mode '{other}' (budget or raw)"
            ))),
        }
    }
}

#[derive(Clone)]
pub struct GuidanceConfig<T: Real> {
    /// Gradient steps per timestep; 0 disables guidance.
    pub inner_steps: usize,
    pub scale: f64,
    pub step_mode: StepMode,
    pub projector: Arc<dyn ManifoldProjector<T>>,
}

impl<T: Real> GuidanceConfig<T> {
    /// Budget-mode configuration with the identity projector.
    pub fn new(inner_steps: usize, scale: f64) -> Self {
        Self {
            inner_steps,
            scale,
            step_mode: StepMode::Budget,
            projector: Arc::new(IdentityProjector),
        }
    }

    pub fn with_step_mode(mut self, mode: StepMode) -> Self {
        self.step_mode = mode;
        self
    }

    pub fn with_projector(mut self, projector: Arc<dyn ManifoldProjector<T>>) -> Self {
        self.projector = projector;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!(
                "guidance scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Step size `ρ` for operator-norm estimate `lipschitz`.
    pub fn step_size(&self, lipschitz: f64) -> f64 {
        match self.step_mode {
            StepMode::Budget => self.scale / (self.inner_steps.max(1) as f64 * lipschitz),
            StepMode::Raw => self.scale,
        }
    }
}

impl<T: Real> fmt::Debug for GuidanceConfig<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GuidanceConfig")
            .field("inner_steps", &self.inner_steps)
            .field("scale", &self.scale)
            .field("step_mode", &self.step_mode)
            .field("projector", &self.projector.name())
            .finish()
    }
}

/// `½‖y − A x₀‖²`
pub fn fidelity_loss<T, A>(y: &ImageTensor<T>, op: &A, x0: &ImageTensor<T>) -> Result<f64>
where
    T: Real,
    A: LinearOperator<T> + ?Sized,
{
    y.check_shape(op.output_shape())?;
    let r = op.apply(x0)?.sub(y)?;
    Ok(0.5
        * r.as_slice()
            .iter()
            .map(|v| v.to_f64_lossy().powi(2))
            .sum::<f64>())
}

/// `∇L = Aᵀ(A x₀ − y)`
pub fn fidelity_grad<T, A>(
    y: &ImageTensor<T>,
    op: &A,
    x0: &ImageTensor<T>,
) -> Result<ImageTensor<T>>
where
    T: Real,
    A: LinearOperator<T> + ?Sized,
{
    y.check_shape(op.output_shape())?;
    op.adjoint(&op.apply(x0)?.sub(y)?)
}

/// Applies `cfg.inner_steps` projected gradient steps to `x0hat`.
///
/// Fails with [`Error::Divergence`] naming the 1-based inner iteration whose
/// result is not finite.
pub fn guided_inner_loop<T, A>(
    x0hat: &ImageTensor<T>,
    y: &ImageTensor<T>,
    op: &A,
    cfg: &GuidanceConfig<T>,
    lipschitz: f64,
) -> Result<ImageTensor<T>>
where
    T: Real,
    A: LinearOperator<T> + ?Sized,
{
    if cfg.inner_steps == 0 {
        return Ok(x0hat.clone());
    }
    cfg.validate()?;
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::invalid(format!(
            "operator norm estimate must be positive, got {lipschitz}"
        )));
    }
    let rho = T::lit(cfg.step_size(lipschitz));
    let mut x = x0hat.clone();
    for iteration in 1..=cfg.inner_steps {
        let grad = fidelity_grad(y, op, &x)?;
        let stepped = x.axpy(-rho, &grad)?;
        if !stepped.all_finite() {
            return Err(Error::Divergence {
                iteration,
                timestep: None,
            });
        }
        x = cfg.projector.project(&stepped).map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence {
                iteration,
                timestep: None,
            },
            other => other,
        })?;
    }
    Ok(x)
}

/// Guided DDIM restoration of measurement `y` with the default `L̂`.
pub fn restore<T, A, D>(
    y: &ImageTensor<T>,
    op: &A,
    denoiser: &D,
    schedule: &NoiseSchedule,
    num_ddim_steps: usize,
    cfg: &GuidanceConfig<T>,
    seed: u64,
) -> Result<ImageTensor<T>>
where
    T: Real,
    A: LinearOperator<T> + ?Sized,
    D: Denoiser<T> + ?Sized,
{
    let lipschitz = if cfg.inner_steps == 0 {
        1.0
    } else {
        operator_norm(op, NORM_ITERS, NORM_SEED)?
    };
    restore_with_norm(
        y,
        op,
        denoiser,
        schedule,
        num_ddim_steps,
        cfg,
        seed,
        lipschitz,
    )
}

/// [`restore`] with a precomputed operator-norm estimate.
#[allow(clippy::too_many_arguments)]
pub fn restore_with_norm<T, A, D>(
    y: &ImageTensor<T>,
    op: &A,
    denoiser: &D,
    schedule: &NoiseSchedule,
    num_ddim_steps: usize,
    cfg: &GuidanceConfig<T>,
    seed: u64,
    lipschitz: f64,
) -> Result<ImageTensor<T>>
where
    T: Real,
    A: LinearOperator<T> + ?Sized,
    D: Denoiser<T> + ?Sized,
{
    y.check_shape(op.output_shape())?;
    let mut x = initial_latent(op.input_shape(), seed)?;
    for (t, t_prev) in ddim_transitions(num_ddim_steps, schedule)? {
        let eps = denoiser.predict_eps(&x, t)?;
        let x0 = tweedie_x0(&x, &eps, schedule.alpha_bar(t))?;
        let refined = guided_inner_loop(&x0, y, op, cfg, lipschitz).map_err(|e| match e {
            Error::Divergence { iteration, .. } => Error::Divergence {
                iteration,
                timestep: Some(t),
            },
            other => other,
        })?;
        x = ddim_step(&x, &refined, &eps, schedule.alpha_bar(t_prev))?;
    }
    Ok(x)
}
