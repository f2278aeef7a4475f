//! Antialiased Keys bicubic resampling weights and the explicit sparse map
//! built from them.

use crate::image::{ImageTensor, Shape};
use crate::scalar::Real;

/// Keys cubic convolution parameter.
pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel, support `(-2, 2)`.
pub fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (KEYS_A + 2.0) * x * x * x - (KEYS_A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        KEYS_A * x * x * x - 5.0 * KEYS_A * x * x + 8.0 * KEYS_A * x - 4.0 * KEYS_A
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Periodic indexing. Keeps the adjoint an exact transpose.
    Circular,
    /// Replicate edge samples.
    Clamp,
}

/// One-dimensional resampling weights from `in_len` to `out_len` samples.
///
/// Output sample `o` is centered at input coordinate `(o + 0.5) * s - 0.5`
/// with `s = in_len / out_len`. When downscaling the kernel is stretched by
/// `s`. Each row is normalized to sum to one and repeated indices (from
/// wrapping or clamping) are merged.
pub fn resample_weights(
    in_len: usize,
    out_len: usize,
    boundary: Boundary,
) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let radius = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let first = (center - radius).floor() as i64;
            let last = (center + radius).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for t in first..=last {
                let w = keys((t as f64 - center) / stretch);
                if w == 0.0 {
                    continue;
                }
                let n = in_len as i64;
                let idx = match boundary {
                    Boundary::Circular => t.rem_euclid(n),
                    Boundary::Clamp => t.clamp(0, n - 1),
                } as usize;
                total += w;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(entry) => entry.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            taps.sort_by_key(|&(i, _)| i);
            for tap in &mut taps {
                tap.1 /= total;
            }
            taps
        })
        .collect()
}

/// Compressed sparse row matrix acting on one channel plane.
#[derive(Debug, Clone)]
pub struct SparseMap<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> SparseMap<T> {
    /// Tensor product of per-axis weight rows: output pixel `(r, c)` takes
    /// `row_w[r] ⊗ col_w[c]` over an `in_h × in_w` plane.
    pub fn separable(
        row_w: &[Vec<(usize, f64)>],
        col_w: &[Vec<(usize, f64)>],
        in_w: usize,
        in_h: usize,
    ) -> Self {
        let mut row_ptr = Vec::with_capacity(row_w.len() * col_w.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for rw in row_w {
            for cw in col_w {
                for &(i, wi) in rw {
                    for &(j, wj) in cw {
                        col_idx.push(i * in_w + j);
                        values.push(T::lit(wi * wj));
                    }
                }
                row_ptr.push(col_idx.len());
            }
        }
        Self {
            rows: row_w.len() * col_w.len(),
            cols: in_h * in_w,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries of row `r` as `(column, weight)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `y = M x` applied to every channel of an interleaved image.
    pub(crate) fn apply_interleaved(&self, x: &ImageTensor<T>, out_shape: Shape) -> ImageTensor<T> {
        let c = x.channels();
        let src = x.as_slice();
        let mut out = vec![T::zero(); self.rows * c];
        for r in 0..self.rows {
            for ch in 0..c {
                let mut acc = T::zero();
                for (j, w) in self.row(r) {
                    acc += w * src[j * c + ch];
                }
                out[r * c + ch] = acc;
            }
        }
        ImageTensor::from_raw(out_shape, out)
    }

    /// `x = Mᵀ y`, scattering each row's weights back onto its columns.
    pub(crate) fn apply_transpose_interleaved(
        &self,
        y: &ImageTensor<T>,
        out_shape: Shape,
    ) -> ImageTensor<T> {
        let c = y.channels();
        let src = y.as_slice();
        let mut out = vec![T::zero(); self.cols * c];
        for r in 0..self.rows {
            for ch in 0..c {
                let v = src[r * c + ch];
                for (j, w) in self.row(r) {
                    out[j * c + ch] += w * v;
                }
            }
        }
        ImageTensor::from_raw(out_shape, out)
    }
}
