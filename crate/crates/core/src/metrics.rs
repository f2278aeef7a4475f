//! Full-reference quality metrics on the `[0, 1]` scale.
//!
//! SSIM follows the reference parameters: an 11×11 Gaussian window with
//! σ = 1.5, `C1 = (0.01)²`, `C2 = (0.03)²`, averaged over valid window
//! positions only (no padding). Color images average the per-channel SSIM.
//! PSNR uses a peak value of 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::operators::gaussian_kernel;
use crate::scalar::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `+∞` for identical images.
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl MetricReport {
    pub fn evaluate<T: Real>(reference: &ImageTensor<T>, test: &ImageTensor<T>) -> Result<Self> {
        let mse = mse(reference, test)?;
        Ok(Self {
            psnr_db: psnr_from_mse(mse),
            ssim: ssim(reference, test)?,
            mse,
        })
    }
}

/// Renders a PSNR value, writing the infinite sentinel as `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

pub fn mse<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    let total: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(total / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Mean SSIM over valid window positions, averaged over channels.
pub fn ssim<T: Real>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w, c) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}",
            a.shape()
        )));
    }
    let win: Vec<f64> = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)?;
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |img: &ImageTensor<T>| -> Vec<f64> {
            img.as_slice()
                .iter()
                .skip(ch)
                .step_by(c)
                .map(|v| v.to_f64_lossy())
                .collect()
        };
        let x = plane(a);
        let y = plane(b);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &win);
        let my = filter_valid(&y, h, w, &win);
        let mxx = filter_valid(&xx, h, w, &win);
        let myy = filter_valid(&yy, h, w, &win);
        let mxy = filter_valid(&xy, h, w, &win);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Separable correlation with `win` keeping only fully-covered positions.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let line = &src[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = win.iter().zip(&line[c..c + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        let dst = &mut out[r * ow..(r + 1) * ow];
        for (t, &wt) in win.iter().enumerate() {
            let srow = &rows[(r + t) * ow..(r + t + 1) * ow];
            for (d, &s) in dst.iter_mut().zip(srow) {
                *d += wt * s;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(shape: Shape, seed: u64) -> ImageTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len()).map(|_| rng.random::<f64>()).collect();
        ImageTensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn mse_basics() {
        let shape = Shape::new(4, 4, 3);
        let a = ImageTensor::zeros(shape).unwrap();
        let b = ImageTensor::filled(shape, 0.5).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 0.25);
        assert!(mse(&a, &ImageTensor::zeros(Shape::new(4, 4, 1)).unwrap()).is_err());
    }

    #[test]
    fn mse_matches_double_loop() {
        let shape = Shape::new(7, 5, 3);
        let a = random_image(shape, 1);
        let b = random_image(shape, 2);
        let mut acc = 0.0;
        for r in 0..7 {
            for c in 0..5 {
                for ch in 0..3 {
                    acc += (a.get(r, c, ch) - b.get(r, c, ch)).powi(2);
                }
            }
        }
        assert!((mse(&a, &b).unwrap() - acc / 105.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_values() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-9);
        let a = random_image(Shape::new(8, 8, 1), 3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(format_db(f64::INFINITY), "inf");
        assert_eq!(format_db(20.0), "20");
    }

    #[test]
    fn doubling_residual_costs_six_db() {
        let a = random_image(Shape::new(8, 8, 1), 4);
        let r = random_image(Shape::new(8, 8, 1), 5).map(|v| 0.1 * (v - 0.5));
        let b1 = a.add(&r).unwrap();
        let b2 = a.axpy(2.0, &r).unwrap();
        let drop = psnr(&a, &b1).unwrap() - psnr(&a, &b2).unwrap();
        assert!((drop - 20.0 * 2f64.log10()).abs() < 1e-9);
        assert!((drop - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random_image(Shape::new(16, 20, 3), 6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let shape = Shape::new(16, 16, 1);
        let a = ImageTensor::filled(shape, 0.5).unwrap();
        let b = ImageTensor::filled(shape, 0.6).unwrap();
        let want = (2.0 * 0.5 * 0.6 + SSIM_C1) / (0.25 + 0.36 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ImageTensor::<f64>::zeros(Shape::new(10, 32, 1)).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = random_image(Shape::new(16, 16, 3), 7);
        let b = random_image(Shape::new(16, 16, 3), 8);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn report_bundles_all_three() {
        let a = random_image(Shape::new(12, 12, 1), 9);
        let r = MetricReport::evaluate(&a, &a).unwrap();
        assert_eq!(r.mse, 0.0);
        assert!(r.psnr_db.is_infinite());
        assert!((r.ssim - 1.0).abs() < 1e-9);
    }
}
