//! Linear degradation operators `A`, their adjoints, measurement noise and
//! operator-norm estimation.
//!
//! Both operators use periodic boundaries so that the adjoint is an exact
//! transpose: the blur adjoint is convolution with the reversed kernel and
//! the bicubic downsampler's adjoint scatters through the same sparse map.

pub mod bicubic;
pub mod blur;
pub mod noise;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Shape};
use crate::rng::{standard_normals, stream_rng, Stream};
use crate::scalar::Real;

pub use bicubic::{keys, resample_weights, Boundary, SparseMap};
pub use blur::{blur_adjoint, blur_apply, gaussian_kernel};
pub use noise::{add_noise, NoiseSpec, DEFAULT_NOISE_SIGMA};

/// Blur kernel side length used by the deblurring task.
pub const DEBLUR_KERNEL_SIZE: usize = 61;
/// Blur standard deviation in pixels used by the deblurring task.
pub const DEBLUR_SIGMA: f64 = 3.0;
/// Downscale factor of the super-resolution task.
pub const SR_FACTOR: usize = 4;

/// A linear map between image shapes with an exact adjoint.
pub trait LinearOperator<T: Real>: Send + Sync {
    fn input_shape(&self) -> Shape;
    fn output_shape(&self) -> Shape;
    fn apply(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>>;
    fn adjoint(&self, y: &ImageTensor<T>) -> Result<ImageTensor<T>>;
}

/// Restoration task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// 4× bicubic super-resolution.
    Sr4x,
    /// Gaussian deblurring, 61 taps at sigma 3.
    Deblur,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Sr4x, Task::Deblur];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Sr4x => "sr4x",
            Task::Deblur => "deblur",
        }
    }

    /// The task's degradation operator for images of `shape`.
    pub fn operator<T: Real>(&self, shape: Shape) -> Result<LinearDegradation<T>> {
        match self {
            Task::Sr4x => build_sr4x(shape),
            Task::Deblur => build_blur(shape, DEBLUR_KERNEL_SIZE, DEBLUR_SIGMA),
        }
    }

    /// Ground-truth shape whose degradation has shape `measurement`.
    pub fn input_shape_for(&self, measurement: Shape) -> Shape {
        match self {
            Task::Sr4x => Shape::new(
                measurement.height * SR_FACTOR,
                measurement.width * SR_FACTOR,
                measurement.channels,
            ),
            Task::Deblur => measurement,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr4x" => Ok(Task::Sr4x),
            "deblur" => Ok(Task::Deblur),
            other => Err(Error::invalid(format!(
                "unknown task '{other}' (expected sr4x or deblur)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianBlur {
        size: usize,
        sigma: f64,
    },
    /// Custom blur kernel (tests, identity operator).
    Convolution {
        size: usize,
    },
    Sr4xBicubic,
    /// Bicubic downsampling by an arbitrary integer factor.
    BicubicDownsample {
        factor: usize,
    },
}

#[derive(Debug, Clone)]
enum Realization<T> {
    Blur { kernel: Vec<T> },
    Sparse(SparseMap<T>),
}

/// A forward/adjoint pair with declared input and output shapes.
#[derive(Debug, Clone)]
pub struct LinearDegradation<T> {
    kind: DegradationKind,
    input_shape: Shape,
    output_shape: Shape,
    realization: Realization<T>,
}

impl<T: Real> LinearDegradation<T> {
    pub fn kind(&self) -> &DegradationKind {
        &self.kind
    }

    /// The blur kernel, for blur operators.
    pub fn kernel(&self) -> Option<&[T]> {
        match &self.realization {
            Realization::Blur { kernel } => Some(kernel),
            Realization::Sparse(_) => None,
        }
    }

    /// The explicit per-channel sparse map, for downsampling operators.
    pub fn sparse_map(&self) -> Option<&SparseMap<T>> {
        match &self.realization {
            Realization::Sparse(m) => Some(m),
            Realization::Blur { .. } => None,
        }
    }
}

impl<T: Real> LinearOperator<T> for LinearDegradation<T> {
    fn input_shape(&self) -> Shape {
        self.input_shape
    }

    fn output_shape(&self) -> Shape {
        self.output_shape
    }

    fn apply(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        x.check_shape(self.input_shape)?;
        match &self.realization {
            Realization::Blur { kernel } => blur_apply(x, kernel),
            Realization::Sparse(map) => Ok(map.apply_interleaved(x, self.output_shape)),
        }
    }

    fn adjoint(&self, y: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        y.check_shape(self.output_shape)?;
        match &self.realization {
            Realization::Blur { kernel } => blur_adjoint(y, kernel),
            Realization::Sparse(map) => Ok(map.apply_transpose_interleaved(y, self.input_shape)),
        }
    }
}

/// Gaussian blur operator on images of `shape`.
pub fn build_blur<T: Real>(shape: Shape, size: usize, sigma: f64) -> Result<LinearDegradation<T>> {
    let kernel = gaussian_kernel(size, sigma)?;
    let mut op = build_convolution(shape, kernel)?;
    op.kind = DegradationKind::GaussianBlur { size, sigma };
    Ok(op)
}

/// Circular convolution with an arbitrary odd-length kernel. Kernels longer
/// than the image wrap around.
pub fn build_convolution<T: Real>(shape: Shape, kernel: Vec<T>) -> Result<LinearDegradation<T>> {
    ImageTensor::<T>::zeros(shape)?;
    if kernel.is_empty() || kernel.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "kernel length must be odd, got {}",
            kernel.len()
        )));
    }
    Ok(LinearDegradation {
        kind: DegradationKind::Convolution { size: kernel.len() },
        input_shape: shape,
        output_shape: shape,
        realization: Realization::Blur { kernel },
    })
}

/// 4× antialiased bicubic downsampler; `H` and `W` must be divisible by 4.
pub fn build_sr4x<T: Real>(input_shape: Shape) -> Result<LinearDegradation<T>> {
    let mut op = build_downsample(input_shape, SR_FACTOR)?;
    op.kind = DegradationKind::Sr4xBicubic;
    Ok(op)
}

/// Antialiased bicubic downsampler by `factor` with circular indexing,
/// materialized as an explicit sparse map per channel plane.
pub fn build_downsample<T: Real>(
    input_shape: Shape,
    factor: usize,
) -> Result<LinearDegradation<T>> {
    ImageTensor::<T>::zeros(input_shape)?;
    if factor == 0
        || !input_shape.height.is_multiple_of(factor)
        || !input_shape.width.is_multiple_of(factor)
    {
        return Err(Error::invalid(format!(
            "input shape {input_shape} is not divisible by downsampling factor {factor}"
        )));
    }
    let out_h = input_shape.height / factor;
    let out_w = input_shape.width / factor;
    let rows = resample_weights(input_shape.height, out_h, Boundary::Circular);
    let cols = resample_weights(input_shape.width, out_w, Boundary::Circular);
    let map = SparseMap::separable(&rows, &cols, input_shape.width, input_shape.height);
    Ok(LinearDegradation {
        kind: DegradationKind::BicubicDownsample { factor },
        input_shape,
        output_shape: Shape::new(out_h, out_w, input_shape.channels),
        realization: Realization::Sparse(map),
    })
}

/// Wraps a closure pair as an operator. Handy for tests and fault injection.
pub struct FnOperator<F, G> {
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub forward: F,
    pub backward: G,
}

impl<T, F, G> LinearOperator<T> for FnOperator<F, G>
where
    T: Real,
    F: Fn(&ImageTensor<T>) -> Result<ImageTensor<T>> + Send + Sync,
    G: Fn(&ImageTensor<T>) -> Result<ImageTensor<T>> + Send + Sync,
{
    fn input_shape(&self) -> Shape {
        self.input_shape
    }

    fn output_shape(&self) -> Shape {
        self.output_shape
    }

    fn apply(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        x.check_shape(self.input_shape)?;
        (self.forward)(x)
    }

    fn adjoint(&self, y: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        y.check_shape(self.output_shape)?;
        (self.backward)(y)
    }
}

/// Minimum number of power iterations accepted by [`operator_norm`].
pub const MIN_POWER_ITERS: usize = 10;

/// Power-iteration estimate of the largest eigenvalue of `AᵀA`.
///
/// Starts from a seeded Gaussian vector and returns
/// `‖AᵀA v_k‖ / ‖v_k‖` for the last iterate, which never decreases as
/// `iters` grows for a fixed seed.
pub fn operator_norm<T, A>(op: &A, iters: usize, seed: u64) -> Result<f64>
where
    T: Real,
    A: LinearOperator<T> + ?Sized,
{
    if iters < MIN_POWER_ITERS {
        return Err(Error::invalid(format!(
            "power iteration needs at least {MIN_POWER_ITERS} iterations, got {iters}"
        )));
    }
    let shape = op.input_shape();
    let mut rng = stream_rng(seed, Stream::PowerIteration);
    let mut v = ImageTensor::from_vec(shape, standard_normals(&mut rng, shape.len()))?;
    let n0 = v.norm();
    v = v.scale(T::one() / n0);
    let mut estimate = 0.0;
    for _ in 0..iters {
        let w = op.adjoint(&op.apply(&v)?)?;
        let nw = w.norm();
        estimate = nw.to_f64_lossy();
        if nw == T::zero() {
            break;
        }
        v = w.scale(T::one() / nw);
    }
    if !estimate.is_finite() {
        return Err(Error::NonFinite("in power iteration".into()));
    }
    Ok(estimate)
}
