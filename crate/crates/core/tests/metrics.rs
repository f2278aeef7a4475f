#![allow(clippy::needless_range_loop)]

mod common;

use common::{rng, uniform_image};
use mpgd_core::metrics::{mse, psnr, psnr_from_mse, ssim};
use mpgd_core::operators::add_noise;
use mpgd_core::{Image, NoiseSpec, Shape};
use proptest::prelude::*;

/// Sliding-window SSIM from the textbook definition: an explicit 2-D
/// Gaussian window per position, statistics as weighted sums.
fn ssim_reference(a: &Image, b: &Image) -> f64 {
    const K: usize = 11;
    let sigma: f64 = 1.5;
    let mut w2 = [[0.0f64; K]; K];
    let mut total = 0.0;
    for (i, row) in w2.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    let mut acc = 0.0;
    for c in 0..ch {
        let mut s = 0.0;
        let mut n = 0.0;
        for r0 in 0..h + 1 - K {
            for c0 in 0..w + 1 - K {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let wt = w2[i][j] / total;
                        let x = a.get(r0 + i, c0 + j, c);
                        let y = b.get(r0 + i, c0 + j, c);
                        sx += wt * x;
                        sy += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let (vx, vy, cov) = (sxx - sx * sx, syy - sy * sy, sxy - sx * sy);
                s += (2.0 * sx * sy + c1) * (2.0 * cov + c2)
                    / ((sx * sx + sy * sy + c1) * (vx + vy + c2));
                n += 1.0;
            }
        }
        acc += s / n;
    }
    acc / ch as f64
}

#[test]
fn ssim_matches_sliding_window_reference() {
    let mut r = rng(21);
    for i in 0..4 {
        let shape = if i % 2 == 0 {
            Shape::new(32, 32, 1)
        } else {
            Shape::new(24, 19, 3)
        };
        let a = uniform_image(&mut r, shape);
        let n = uniform_image(&mut r, shape);
        let b = a.axpy(0.2 * i as f64, &n).unwrap();
        assert!((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs() < 1e-6);
    }
}

#[test]
fn psnr_strictly_decreases_with_noise() {
    let shape = Shape::new(64, 64, 1);
    let x = uniform_image(&mut rng(22), shape);
    let values: Vec<f64> = [0.01, 0.02, 0.05, 0.1]
        .iter()
        .map(|&s| psnr(&x, &add_noise(&x, NoiseSpec::new(s, 5).unwrap()).unwrap()).unwrap())
        .collect();
    assert!(values.windows(2).all(|w| w[0] > w[1]), "{values:?}");
    assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let shape = Shape::new(14, 12, 3);
        let a = uniform_image(&mut r, shape);
        let b = uniform_image(&mut r, shape);
        prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
    }

    #[test]
    fn self_similarity_is_maximal(seed in any::<u64>(), amp in 1e-3f64..0.5) {
        let mut r = rng(seed);
        let shape = Shape::new(16, 16, 1);
        let a = uniform_image(&mut r, shape);
        let b = a.axpy(amp, &uniform_image(&mut r, shape)).unwrap();
        let own = ssim(&a, &a).unwrap();
        prop_assert!((own - 1.0).abs() < 1e-9);
        prop_assert!(ssim(&a, &b).unwrap() <= own);
    }
}
