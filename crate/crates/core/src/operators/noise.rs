use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{standard_normals, stream_rng, Stream};
use crate::scalar::Real;

/// Default measurement noise level on the `[0, 1]` pixel scale.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;

/// Additive white Gaussian measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::invalid(format!(
                "noise sigma must be finite and >= 0, got {sigma}"
            )));
        }
        Ok(Self { sigma, seed })
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_NOISE_SIGMA,
            seed: 0,
        }
    }
}

/// `img + sigma * z` with `z` drawn from the measurement-noise stream of
/// `spec.seed`. The result is not clamped.
pub fn add_noise<T: Real>(img: &ImageTensor<T>, spec: NoiseSpec) -> Result<ImageTensor<T>> {
    let spec = NoiseSpec::new(spec.sigma, spec.seed)?;
    if spec.sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = stream_rng(spec.seed, Stream::MeasurementNoise);
    let z: Vec<T> = standard_normals(&mut rng, img.len());
    let s = T::lit(spec.sigma);
    let data = img
        .as_slice()
        .iter()
        .zip(z)
        .map(|(&v, z)| v + s * z)
        .collect();
    ImageTensor::from_vec(img.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;

    #[test]
    fn zero_sigma_is_identity() {
        let img = ImageTensor::filled(Shape::new(4, 4, 3), 0.3).unwrap();
        assert_eq!(
            add_noise(&img, NoiseSpec::new(0.0, 7).unwrap()).unwrap(),
            img
        );
    }

    #[test]
    fn sample_std_near_sigma() {
        let img = ImageTensor::<f64>::zeros(Shape::new(100, 100, 1)).unwrap();
        let noisy = add_noise(&img, NoiseSpec::new(0.05, 42).unwrap()).unwrap();
        let m = noisy.mean();
        let var = noisy
            .as_slice()
            .iter()
            .map(|v| (v - m).powi(2))
            .sum::<f64>()
            / 1e4;
        let sd = var.sqrt();
        assert!((0.045..=0.055).contains(&sd), "std {sd}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let img = ImageTensor::filled(Shape::new(8, 8, 1), 0.5).unwrap();
        let spec = NoiseSpec::new(0.05, 123).unwrap();
        assert_eq!(
            add_noise(&img, spec).unwrap(),
            add_noise(&img, spec).unwrap()
        );
        let other = add_noise(&img, NoiseSpec::new(0.05, 124).unwrap()).unwrap();
        assert_ne!(add_noise(&img, spec).unwrap(), other);
    }

    #[test]
    fn noise_is_not_clamped() {
        let img = ImageTensor::<f64>::zeros(Shape::new(32, 32, 1)).unwrap();
        let noisy = add_noise(&img, NoiseSpec::new(0.05, 1).unwrap()).unwrap();
        assert!(noisy.as_slice().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn invalid_sigma_rejected() {
        assert!(NoiseSpec::new(-0.1, 0).is_err());
        assert!(NoiseSpec::new(f64::NAN, 0).is_err());
    }
}
