//! Separable circular Gaussian blur.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Real;

/// Normalized 1-D Gaussian of odd length `size`, centered at `(size - 1) / 2`.
pub fn gaussian_kernel<T: Real>(size: usize, sigma: f64) -> Result<Vec<T>> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "kernel size must be odd and positive, got {size}"
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "kernel sigma must be positive, got {sigma}"
        )));
    }
    let center = ((size - 1) / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - center;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| T::lit(v / total)).collect())
}

/// Circular convolution with `kernel` along rows then columns, each channel
/// independently: `out[i] = Σ_k kernel[k] · in[(i - k + c) mod n]`.
/// Kernels longer than the image wrap around.
pub fn blur_apply<T: Real>(img: &ImageTensor<T>, kernel: &[T]) -> Result<ImageTensor<T>> {
    check_kernel(img, kernel)?;
    Ok(filter_separable(img, kernel))
}

/// Adjoint of [`blur_apply`]: circular convolution with the reversed kernel.
pub fn blur_adjoint<T: Real>(img: &ImageTensor<T>, kernel: &[T]) -> Result<ImageTensor<T>> {
    check_kernel(img, kernel)?;
    let reversed: Vec<T> = kernel.iter().rev().copied().collect();
    Ok(filter_separable(img, &reversed))
}

fn check_kernel<T: Real>(img: &ImageTensor<T>, kernel: &[T]) -> Result<()> {
    if kernel.is_empty() || kernel.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "blur kernel length must be odd, got {}",
            kernel.len()
        )));
    }
    if img.is_empty() {
        return Err(Error::invalid("cannot blur an empty image"));
    }
    Ok(())
}

fn filter_separable<T: Real>(img: &ImageTensor<T>, kernel: &[T]) -> ImageTensor<T> {
    let shape = img.shape();
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let half = kernel.len() / 2;
    let src = img.as_slice();

    // Horizontal pass. Each channel row is padded periodically so that
    // out[i] = Σ_k kernel[k] · padded[i + (K-1) - k], padded[p] = row[(p - half) mod w]
    // and the tap loop streams over contiguous memory.
    let mut horiz = vec![T::zero(); src.len()];
    let mut padded = vec![T::zero(); w + kernel.len() - 1];
    let mut acc = vec![T::zero(); w];
    let last = kernel.len() - 1;
    for r in 0..h {
        for ch in 0..c {
            for (p, slot) in padded.iter_mut().enumerate() {
                let col = (p + w - half % w) % w;
                *slot = src[(r * w + col) * c + ch];
            }
            acc.iter_mut().for_each(|a| *a = T::zero());
            for (k, &kw) in kernel.iter().enumerate() {
                let window = &padded[last - k..last - k + w];
                for (a, &v) in acc.iter_mut().zip(window) {
                    *a += kw * v;
                }
            }
            for (col, &a) in acc.iter().enumerate() {
                horiz[(r * w + col) * c + ch] = a;
            }
        }
    }

    // Vertical pass: whole interleaved rows are axpy'd together.
    let row_len = w * c;
    let mut out = vec![T::zero(); src.len()];
    for r in 0..h {
        let dst = &mut out[r * row_len..(r + 1) * row_len];
        for (k, &kw) in kernel.iter().enumerate() {
            let sr = (r + h + half - k % h) % h;
            let srow = &horiz[sr * row_len..(sr + 1) * row_len];
            for (d, &s) in dst.iter_mut().zip(srow) {
                *d += kw * s;
            }
        }
    }
    ImageTensor::from_raw(shape, out)
}
