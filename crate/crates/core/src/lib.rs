//! Training-free guided diffusion restoration with multi-step manifold
//! preserving guidance.
//!
//! The engine restores images degraded by a known linear operator `A`
//! (4× bicubic super-resolution or Gaussian blur) from a noisy measurement
//! `y = A x + n`. Each DDIM step forms the Tweedie estimate `x̂₀`, refines it
//! with several projected gradient steps on `½‖y − A x̂₀‖²`, and moves to the
//! next timestep with the refined estimate.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`, which is what the harness, CLI
//! and verification suite use.

pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod operators;
pub mod rng;
pub mod scalar;
pub mod selftest;

pub use error::{Error, Result};
pub use image::{ImageTensor, Shape};
pub use operators::{LinearOperator, NoiseSpec, Task};
pub use scalar::Real;

/// Engine version recorded in sweep manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Image = image::ImageTensor<f64>;
pub type Image32 = image::ImageTensor<f32>;
pub type Degradation = operators::LinearDegradation<f64>;
pub type GaussianDenoiser = diffusion::GaussianAnalyticDenoiser<f64>;
pub type GmmDenoiser = diffusion::GmmAnalyticDenoiser<f64>;
pub type PcaProjector = guidance::PcaProjector<f64>;
pub type GuidanceConfig = guidance::GuidanceConfig<f64>;
