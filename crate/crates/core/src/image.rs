//! Image tensors, PNG I/O and dataset normalization.
//!
//! Pixels live on the `[0, 1]` scale in row-major `(row, column, channel)`
//! order. Values are never clamped inside numerical pipelines; clamping and
//! quantization happen only when an image is written to disk.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::bicubic::{resample_weights, Boundary};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels per channel.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// H×W×C image with real-valued samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> ImageTensor<T> {
    /// Builds a tensor, validating the shape and that every sample is finite.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "at flat index {pos} of {shape} image"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Used on hot paths whose
    /// callers check finiteness themselves.
    pub(crate) fn from_raw(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { shape, data }
    }

    pub fn filled(shape: Shape, value: T) -> Result<Self> {
        validate_shape(shape)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("fill value".into()));
        }
        Ok(Self {
            shape,
            data: vec![value; shape.len()],
        })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[(row * self.shape.width + col) * self.shape.channels + ch]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self::from_raw(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self + s * other`
    pub fn axpy(&self, s: T, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + s * b)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::lit(self.data.len() as f64)
    }

    /// Converts the sample type.
    pub fn cast<U: Real>(&self) -> ImageTensor<U> {
        ImageTensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: other.shape,
            });
        }
        Ok(())
    }

    pub fn check_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.shape,
            });
        }
        Ok(())
    }

    /// The image as it would read back after [`save_image`]: clamped to
    /// `[0, 1]` and quantized to 8 bits.
    pub fn quantized(&self) -> Self {
        self.map(|v| T::lit(f64::from(quantize_sample(v.to_f64_lossy())) / 255.0))
    }

    /// Rectangular sub-image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height() || left + width > self.width()
        {
            return Err(Error::invalid(format!(
                "crop {height}x{width} at ({top},{left}) outside {} image",
                self.shape
            )));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for r in top..top + height {
            let start = (r * self.width() + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Self::from_raw(Shape::new(height, width, c), data))
    }
}

fn validate_shape(shape: Shape) -> Result<()> {
    if shape.height == 0 || shape.width == 0 {
        return Err(Error::invalid(format!(
            "image dimensions must be positive, got {shape}"
        )));
    }
    if shape.channels != 1 && shape.channels != 3 {
        return Err(Error::invalid(format!(
            "images have 1 or 3 channels, got {}",
            shape.channels
        )));
    }
    Ok(())
}

/// Clamp to `[0, 1]` then round half up onto the 8-bit grid.
#[inline]
pub fn quantize_sample(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Reads an 8-bit grayscale or RGB PNG, mapping byte `v` to `v / 255`.
pub fn load_image<T: Real>(path: impl AsRef<Path>) -> Result<ImageTensor<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let decode_err = |e: png::DecodingError| Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!("color type {other:?}, expected 8-bit grayscale or RGB"),
            })
        }
    };
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("bit depth {depth:?}, expected 8"),
        });
    }
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        path: path.to_path_buf(),
        detail: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let row_bytes = w * channels;
    let mut data = Vec::with_capacity(h * row_bytes);
    for r in 0..h {
        let line = &buf[r * frame.line_size..r * frame.line_size + row_bytes];
        data.extend(line.iter().map(|&b| T::lit(f64::from(b) / 255.0)));
    }
    ImageTensor::from_vec(Shape::new(h, w, channels), data)
}

/// Writes an 8-bit PNG after clamping to `[0, 1]` and rounding half up.
pub fn save_image<T: Real>(img: &ImageTensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let shape = img.shape();
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        shape.width as u32,
        shape.height as u32,
    );
    encoder.set_color(if shape.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img
        .as_slice()
        .iter()
        .map(|v| quantize_sample(v.to_f64_lossy()))
        .collect();
    let encode_err = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Crops the largest centered square and resamples it to `side × side` with
/// the antialiased Keys bicubic kernel. Edges are clamped, not wrapped.
pub fn center_crop_resize<T: Real>(img: &ImageTensor<T>, side: usize) -> Result<ImageTensor<T>> {
    if side == 0 {
        return Err(Error::invalid("side must be at least 1"));
    }
    let square = img.height().min(img.width());
    let top = (img.height() - square) / 2;
    let left = (img.width() - square) / 2;
    let cropped = img.crop(top, left, square, square)?;
    if square == side {
        return Ok(cropped);
    }
    let weights: Vec<Vec<(usize, T)>> = resample_weights(square, side, Boundary::Clamp)
        .into_iter()
        .map(|row| row.into_iter().map(|(i, w)| (i, T::lit(w))).collect())
        .collect();
    let c = img.channels();

    // Horizontal pass: square × side.
    let mut tmp = vec![T::zero(); square * side * c];
    for r in 0..square {
        for (o, taps) in weights.iter().enumerate() {
            for ch in 0..c {
                let mut acc = T::zero();
                for &(i, w) in taps {
                    acc += w * cropped.data[(r * square + i) * c + ch];
                }
                tmp[(r * side + o) * c + ch] = acc;
            }
        }
    }
    // Vertical pass: side × side.
    let mut out = vec![T::zero(); side * side * c];
    let row_len = side * c;
    for (o, taps) in weights.iter().enumerate() {
        let dst = &mut out[o * row_len..(o + 1) * row_len];
        for &(i, w) in taps {
            let src = &tmp[i * row_len..(i + 1) * row_len];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    ImageTensor::from_vec(Shape::new(side, side, c), out)
}
