//! Noise-prediction contract and closed-form denoisers for Gaussian and
//! Gaussian-mixture image priors.

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Shape};
use crate::scalar::Real;

use super::schedule::NoiseSchedule;

/// Predicts the noise `ε̂(x_t, t)` of the forward process
/// `x_t = √ᾱ_t x₀ + √(1 − ᾱ_t) z`.
pub trait Denoiser<T: Real>: Send + Sync {
    fn predict_eps(&self, x_t: &ImageTensor<T>, t: usize) -> Result<ImageTensor<T>>;
}

fn alpha_bar_at(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    if t == 0 || t > schedule.train_steps() {
        return Err(Error::invalid(format!(
            "timestep {t} outside 1..={}",
            schedule.train_steps()
        )));
    }
    Ok(schedule.alpha_bar(t))
}

/// Converts a posterior-mean estimate into the matching noise prediction.
fn eps_from_x0<T: Real>(
    x_t: &ImageTensor<T>,
    x0: &ImageTensor<T>,
    alpha_bar: f64,
) -> Result<ImageTensor<T>> {
    let sa = T::lit(alpha_bar.sqrt());
    let inv = T::lit(1.0 / (1.0 - alpha_bar).sqrt());
    x_t.zip_map(x0, |x, m| (x - sa * m) * inv)
}

/// Exact MMSE denoiser for the isotropic prior `N(μ, σ_p² I)`.
#[derive(Debug, Clone)]
pub struct GaussianAnalyticDenoiser<T> {
    mean: ImageTensor<T>,
    prior_var: f64,
    schedule: NoiseSchedule,
}

impl<T: Real> GaussianAnalyticDenoiser<T> {
    pub fn new(mean: ImageTensor<T>, prior_var: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(prior_var > 0.0 && prior_var.is_finite()) {
            return Err(Error::invalid(format!(
                "prior variance must be positive, got {prior_var}"
            )));
        }
        Ok(Self {
            mean,
            prior_var,
            schedule,
        })
    }

    pub fn mean(&self) -> &ImageTensor<T> {
        &self.mean
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn shape(&self) -> Shape {
        self.mean.shape()
    }

    /// `E[x₀ | x_t] = (σ_p² √ᾱ x_t + (1 − ᾱ) μ) / (ᾱ σ_p² + 1 − ᾱ)`.
    pub fn posterior_mean(&self, x_t: &ImageTensor<T>, t: usize) -> Result<ImageTensor<T>> {
        let ab = alpha_bar_at(&self.schedule, t)?;
        let denom = ab * self.prior_var + 1.0 - ab;
        let cx = T::lit(self.prior_var * ab.sqrt() / denom);
        let cm = T::lit((1.0 - ab) / denom);
        x_t.zip_map(&self.mean, |x, m| cx * x + cm * m)
    }
}

impl<T: Real> Denoiser<T> for GaussianAnalyticDenoiser<T> {
    fn predict_eps(&self, x_t: &ImageTensor<T>, t: usize) -> Result<ImageTensor<T>> {
        let x0 = self.posterior_mean(x_t, t)?;
        eps_from_x0(x_t, &x0, self.schedule.alpha_bar(t))
    }
}

#[derive(Debug, Clone)]
pub struct GmmComponent<T> {
    pub weight: f64,
    pub mean: ImageTensor<T>,
    pub var: f64,
}

/// Exact MMSE denoiser for a mixture of isotropic Gaussians.
///
/// Responsibilities come from each component's marginal likelihood of
/// `x_t`, `N(√ᾱ μ_k, (ᾱ v_k + 1 − ᾱ) I)`, and the prediction is the
/// responsibility-weighted combination of the per-component posteriors.
#[derive(Debug, Clone)]
pub struct GmmAnalyticDenoiser<T> {
    components: Vec<GmmComponent<T>>,
    schedule: NoiseSchedule,
}

impl<T: Real> GmmAnalyticDenoiser<T> {
    pub fn new(components: Vec<GmmComponent<T>>, schedule: NoiseSchedule) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("mixture needs at least one component"))?;
        let shape = first.mean.shape();
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            c.mean.check_shape(shape)?;
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::invalid(format!(
                    "component {k} weight must be positive"
                )));
            }
            if !(c.var > 0.0 && c.var.is_finite()) {
                return Err(Error::invalid(format!(
                    "component {k} variance must be positive"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            components,
            schedule,
        })
    }

    pub fn components(&self) -> &[GmmComponent<T>] {
        &self.components
    }

    pub fn shape(&self) -> Shape {
        self.components[0].mean.shape()
    }

    /// Posterior component probabilities given `x_t`.
    pub fn responsibilities(&self, x_t: &ImageTensor<T>, t: usize) -> Result<Vec<f64>> {
        let ab = alpha_bar_at(&self.schedule, t)?;
        let d = x_t.len() as f64;
        let sa = ab.sqrt();
        let mut logits = Vec::with_capacity(self.components.len());
        for c in &self.components {
            x_t.check_same_shape(&c.mean)?;
            let s2 = ab * c.var + 1.0 - ab;
            let sq: f64 = x_t
                .as_slice()
                .iter()
                .zip(c.mean.as_slice())
                .map(|(&x, &m)| {
                    let r = x.to_f64_lossy() - sa * m.to_f64_lossy();
                    r * r
                })
                .sum();
            logits.push(c.weight.ln() - 0.5 * d * s2.ln() - sq / (2.0 * s2));
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }

    pub fn posterior_mean(&self, x_t: &ImageTensor<T>, t: usize) -> Result<ImageTensor<T>> {
        let resp = self.responsibilities(x_t, t)?;
        let ab = self.schedule.alpha_bar(t);
        let mut acc = vec![T::zero(); x_t.len()];
        for (c, r) in self.components.iter().zip(resp) {
            let denom = ab * c.var + 1.0 - ab;
            let cx = T::lit(r * c.var * ab.sqrt() / denom);
            let cm = T::lit(r * (1.0 - ab) / denom);
            for ((a, &x), &m) in acc.iter_mut().zip(x_t.as_slice()).zip(c.mean.as_slice()) {
                *a += cx * x + cm * m;
            }
        }
        ImageTensor::from_vec(x_t.shape(), acc)
    }
}

impl<T: Real> Denoiser<T> for GmmAnalyticDenoiser<T> {
    fn predict_eps(&self, x_t: &ImageTensor<T>, t: usize) -> Result<ImageTensor<T>> {
        let x0 = self.posterior_mean(x_t, t)?;
        eps_from_x0(x_t, &x0, self.schedule.alpha_bar(t))
    }
}
