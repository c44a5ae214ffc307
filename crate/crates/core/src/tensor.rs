//! Dense 4-D tensors in `[batch, channels, height, width]` layout.
//!
//! Training and inference run in `f32`. The same code is instantiated with
//! `f64` by the gradient-check and oracle tests.

use std::fmt::{Debug, Display};
use std::hash::{Hash, Hasher};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar types the engine can compute in.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts from `f64`, rounding to nearest for `f32`.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Raw IEEE bits widened to 64 bits, used for hashing and bitwise comparisons.
    fn bits(self) -> u64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape([batch, channels, height, width]));
        }
        Ok(Shape {
            batch,
            channels,
            height,
            width,
        })
    }

    /// Shape of a per-channel vector stored as `[1, c, 1, 1]`.
    pub fn vector(len: usize) -> Result<Self> {
        Shape::new(1, len, 1, 1)
    }

    pub fn scalar() -> Self {
        Shape {
            batch: 1,
            channels: 1,
            height: 1,
            width: 1,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Number of pixels in one spatial plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Number of values in one batch item.
    pub fn sample(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn with_batch(&self, batch: usize) -> Result<Self> {
        Shape::new(batch, self.channels, self.height, self.width)
    }

    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        Shape::new(self.batch, channels, self.height, self.width)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Contiguous row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                expected: shape.numel(),
                found: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, value: T) {
        let i = self.offset(b, c, y, x);
        self.data[i] = value;
    }

    #[inline]
    fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        debug_assert!(b < s.batch && c < s.channels && y < s.height && x < s.width);
        ((b * s.channels + c) * s.height + y) * s.width + x
    }

    /// Slice holding batch item `b`.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.shape.sample();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        ensure_same_shape("add", self.shape, other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyDataset)?.shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            ensure_same_shape("stack", first, t.shape)?;
            data.extend_from_slice(&t.data);
        }
        let batch: usize = items.iter().map(|t| t.shape.batch).sum();
        Tensor::from_vec(first.with_batch(batch)?, data)
    }

    /// Splits along the batch axis into single-sample tensors.
    pub fn unstack(&self) -> Vec<Tensor<T>> {
        let shape = Shape {
            batch: 1,
            ..self.shape
        };
        self.data
            .chunks_exact(self.shape.sample())
            .map(|chunk| Tensor {
                shape,
                data: chunk.to_vec(),
            })
            .collect()
    }

    /// Clamps every value into `[lo, hi]`.
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Order-sensitive hash of shape and raw bits.
    pub fn content_hash<H: Hasher>(&self, state: &mut H) {
        self.shape.hash(state);
        for v in &self.data {
            v.bits().hash(state);
        }
    }

    /// True when both tensors have equal shape and identical bit patterns.
    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }
}

pub(crate) fn ensure_same_shape(op: &'static str, expected: Shape, found: Shape) -> Result<()> {
    let pairs = [
        ("batch", expected.batch, found.batch),
        ("channels", expected.channels, found.channels),
        ("height", expected.height, found.height),
        ("width", expected.width, found.width),
    ];
    for (dim, e, f) in pairs {
        if e != f {
            return Err(Error::shape(op, dim, e, f));
        }
    }
    Ok(())
}
