//! Manifold projectors applied after every guidance update.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::Real;

/// Maps an image back onto the prior's image manifold.
pub trait ManifoldProjector<T: Real>: Send + Sync {
    fn project(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>>;

    fn name(&self) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityProjector;

impl<T: Real> ManifoldProjector<T> for IdentityProjector {
    fn project(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        Ok(x.clone())
    }

    fn name(&self) -> String {
        "identity".into()
    }
}

/// Affine projection onto `μ + span(V)` for an orthonormal basis `V`
/// (`k × d`, one row per component) over flattened images.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjector<T> {
    mean: Vec<T>,
    basis: Vec<T>,
    k: usize,
}

/// File magic of the projector format.
pub const PROJECTOR_MAGIC: &[u8; 8] = b"MPGDPCA1";

impl<T: Real> PcaProjector<T> {
    /// Builds a projector, re-orthonormalizing the rows of `basis`.
    pub fn new(mean: Vec<T>, basis: Vec<T>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || !basis.len().is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "basis length {} is not a multiple of dimension {d}",
                basis.len()
            )));
        }
        let k = basis.len() / d;
        let mut p = Self { mean, basis, k };
        p.orthonormalize()?;
        Ok(p)
    }

    /// Number of basis vectors.
    pub fn rank(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn basis_row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.basis[i * d..(i + 1) * d]
    }

    /// Coefficients `V (x − μ)`.
    pub fn coefficients(&self, x: &[T]) -> Vec<T> {
        (0..self.k)
            .map(|i| {
                self.basis_row(i)
                    .iter()
                    .zip(x.iter().zip(&self.mean))
                    .fold(T::zero(), |acc, (&v, (&xi, &m))| acc + v * (xi - m))
            })
            .collect()
    }

    /// Modified Gram–Schmidt, run twice for orthogonality to rounding level.
    fn orthonormalize(&mut self) -> Result<()> {
        let d = self.dim();
        for _ in 0..2 {
            for i in 0..self.k {
                for j in 0..i {
                    let (head, tail) = self.basis.split_at_mut(i * d);
                    let prev = &head[j * d..(j + 1) * d];
                    let row = &mut tail[..d];
                    let dot = row
                        .iter()
                        .zip(prev)
                        .fold(T::zero(), |a, (&x, &y)| a + x * y);
                    for (r, &p) in row.iter_mut().zip(prev) {
                        *r -= dot * p;
                    }
                }
                let row = &mut self.basis[i * d..(i + 1) * d];
                let n = row.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
                if n <= T::zero() || !n.is_finite() {
                    return Err(Error::invalid(format!("basis row {i} is degenerate")));
                }
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        Ok(())
    }

    /// Writes `magic, k, d, μ, V` as little-endian u64 / f64 values.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(PROJECTOR_MAGIC)?;
        write(&(self.k as u64).to_le_bytes())?;
        write(&(self.dim() as u64).to_le_bytes())?;
        for v in self.mean.iter().chain(&self.basis) {
            write(&v.to_f64_lossy().to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != PROJECTOR_MAGIC {
            return Err(bad("bad magic, not a projector file"));
        }
        let mut word = [0u8; 8];
        let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
            r.read_exact(&mut word)
                .map_err(|_| bad("truncated header"))?;
            Ok(u64::from_le_bytes(word))
        };
        let k = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        if d == 0 {
            return Err(bad("zero dimension"));
        }
        let expected = d
            .checked_mul(k + 1)
            .ok_or_else(|| bad("header sizes overflow"))?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        if raw.len() != expected * 8 {
            return Err(bad(&format!(
                "payload has {} bytes, header implies {}",
                raw.len(),
                expected * 8
            )));
        }
        let values: Vec<T> = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        let (mean, basis) = values.split_at(d);
        Ok(Self {
            mean: mean.to_vec(),
            basis: basis.to_vec(),
            k,
        })
    }
}

impl<T: Real> ManifoldProjector<T> for PcaProjector<T> {
    fn project(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "projector dimension {} does not match image of {} samples",
                self.dim(),
                x.len()
            )));
        }
        let coeffs = self.coefficients(x.as_slice());
        let mut out = self.mean.clone();
        for (i, &c) in coeffs.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(self.basis_row(i)) {
                *o += c * v;
            }
        }
        ImageTensor::from_vec(x.shape(), out)
    }

    fn name(&self) -> String {
        format!("pca(k={})", self.k)
    }
}

/// Fits `μ` and the top-`k` right singular vectors of the centered data.
///
/// Directions whose singular value is zero (to rounding) are dropped, so
/// the stored rank can be lower than `k` on degenerate data.
pub fn train_pca_projector<T: Real>(
    images: &[ImageTensor<T>],
    k: usize,
) -> Result<PcaProjector<T>> {
    if images.len() < 2 {
        return Err(Error::invalid(format!(
            "projector training needs at least 2 images, got {}",
            images.len()
        )));
    }
    let shape = images[0].shape();
    for img in images {
        img.check_shape(shape)?;
    }
    let n = images.len();
    let d = shape.len();
    let max_k = (n - 1).min(d);
    if k == 0 || k > max_k {
        return Err(Error::invalid(format!("k must be in 1..={max_k}, got {k}")));
    }
    let mut mean = vec![0.0f64; d];
    for img in images {
        for (m, v) in mean.iter_mut().zip(img.as_slice()) {
            *m += v.to_f64_lossy();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| {
        images[i].as_slice()[j].to_f64_lossy() - mean[j]
    });
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let data_norm = images
        .iter()
        .flat_map(|img| img.as_slice())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    let tol = svd.singular_values.max().max(data_norm) * (n.max(d) as f64) * f64::EPSILON;
    let mut basis = Vec::with_capacity(k * d);
    for &idx in order.iter().take(k) {
        if svd.singular_values[idx] <= tol {
            break;
        }
        basis.extend(v_t.row(idx).iter().map(|&v| T::lit(v)));
    }
    PcaProjector::new(mean.into_iter().map(T::lit).collect(), basis)
}
