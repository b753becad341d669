//! Batch-major NCHW tensors, precision modes and the dense convolution
//! routines that every other engine is checked against.

mod binary16;
mod conv;
mod geometry;
pub(crate) mod io;

pub use binary16::{
    from_binary16_bits, round_f64_to_binary16, round_to_binary16, to_binary16_bits, BINARY16_MAX,
};
pub use conv::{crop, dense_conv_fast, dense_conv_reference, zero_pad};
pub(crate) use conv::{axpy_plane, dot_plane, scatter_plane};
pub use geometry::ConvGeometry;
pub use io::{read_tensor, write_tensor};
pub(crate) use io as io_helpers;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;

/// Numeric storage mode of a tensor or filter.
///
/// `Binary32` keeps values at the scalar's own precision. `Binary16` rounds
/// every stored value to IEEE binary16 while arithmetic still accumulates in
/// the scalar type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionMode {
    #[default]
    Binary32,
    Binary16,
}

impl PrecisionMode {
    pub fn tag(self) -> u8 {
        match self {
            PrecisionMode::Binary32 => 0,
            PrecisionMode::Binary16 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(PrecisionMode::Binary32),
            1 => Ok(PrecisionMode::Binary16),
            t => Err(invalid!("unknown precision tag {t}")),
        }
    }

    /// Bytes per value in the serialized form.
    pub fn width(self) -> usize {
        match self {
            PrecisionMode::Binary32 => 4,
            PrecisionMode::Binary16 => 2,
        }
    }

    /// Rounds a value the way this mode stores it.
    #[inline]
    pub fn store<T: Scalar>(self, v: T) -> T {
        match self {
            PrecisionMode::Binary32 => v,
            PrecisionMode::Binary16 => round_to_binary16(v),
        }
    }

    /// The stricter of two modes; binary16 wins.
    pub fn combine(self, other: Self) -> Self {
        if self == PrecisionMode::Binary16 || other == PrecisionMode::Binary16 {
            PrecisionMode::Binary16
        } else {
            PrecisionMode::Binary32
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PrecisionMode::Binary32 => "binary32",
            PrecisionMode::Binary16 => "binary16",
        }
    }
}

impl std::str::FromStr for PrecisionMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary32" | "float" | "f32" => Ok(PrecisionMode::Binary32),
            "binary16" | "half" | "f16" => Ok(PrecisionMode::Binary16),
            other => Err(invalid!("unknown precision '{other}'")),
        }
    }
}

/// Dimensions of an NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch sample.
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub const fn flatten(&self, b: usize, ch: usize, y: usize, x: usize) -> usize {
        ((b * self.c + ch) * self.h + y) * self.w + x
    }

    #[inline]
    pub const fn unflatten(&self, idx: usize) -> (usize, usize, usize, usize) {
        let x = idx % self.w;
        let rest = idx / self.w;
        let y = rest % self.h;
        let rest = rest / self.h;
        (rest / self.c, rest % self.c, y, x)
    }

    pub fn with_batch(&self, n: usize) -> Self {
        Shape4 { n, ..*self }
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Contiguous NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor4<T> {
    shape: Shape4,
    data: Vec<T>,
    precision: PrecisionMode,
}

impl<T: Scalar> DenseTensor4<T> {
    /// Wraps `data`; in binary16 mode every value is rounded on the way in.
    pub fn new(shape: Shape4, mut data: Vec<T>, precision: PrecisionMode) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(shape_err!(
                "tensor {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            ));
        }
        if precision == PrecisionMode::Binary16 {
            data.iter_mut().for_each(|v| *v = round_to_binary16(*v));
        }
        Ok(DenseTensor4 {
            shape,
            data,
            precision,
        })
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        Self::new(shape, data, PrecisionMode::Binary32)
    }

    pub fn zeros(shape: Shape4) -> Self {
        DenseTensor4 {
            shape,
            data: vec![T::zero(); shape.len()],
            precision: PrecisionMode::Binary32,
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.n {
            for ch in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        DenseTensor4 {
            shape,
            data,
            precision: PrecisionMode::Binary32,
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn precision(&self) -> PrecisionMode {
        self.precision
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the raw values. Callers writing into a binary16
    /// tensor are responsible for storing rounded values.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, b: usize, ch: usize, y: usize, x: usize) -> T {
        self.data[self.shape.flatten(b, ch, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, ch: usize, y: usize, x: usize, v: T) {
        let i = self.shape.flatten(b, ch, y, x);
        self.data[i] = self.precision.store(v);
    }

    /// Values of batch sample `b`.
    pub fn sample(&self, b: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[b * len..(b + 1) * len]
    }

    /// Re-tags the tensor; switching to binary16 rounds every value.
    pub fn with_precision(mut self, precision: PrecisionMode) -> Self {
        if precision == PrecisionMode::Binary16 && self.precision != precision {
            self.data.iter_mut().for_each(|v| *v = round_to_binary16(*v));
        }
        self.precision = precision;
        self
    }

    /// Same values, new dimensions with equal element count.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        if shape.len() != self.shape.len() {
            return Err(shape_err!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(DenseTensor4 { shape, ..self })
    }

    /// Copies samples `range` into a new tensor.
    pub fn slice_batch(&self, range: std::ops::Range<usize>) -> Self {
        let len = self.shape.sample_len();
        DenseTensor4 {
            shape: self.shape.with_batch(range.len()),
            data: self.data[range.start * len..range.end * len].to_vec(),
            precision: self.precision,
        }
    }

    /// Gathers the listed samples, in order, into a new tensor.
    pub fn gather_batch(&self, indices: &[usize]) -> Self {
        let len = self.shape.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        DenseTensor4 {
            shape: self.shape.with_batch(indices.len()),
            data,
            precision: self.precision,
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Converts element type (e.g. f64 tensors for gradient checks).
    pub fn cast<U: Scalar>(&self) -> DenseTensor4<U> {
        DenseTensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            precision: self.precision,
        }
    }
}
