use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use super::AutodiffError;

/// Floating-point element type of a [`Tensor`].
///
/// Training runs in `f32`; gradient checking runs the same code in `f64`.
pub trait Real:
    Float + Default + Debug + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Extents of a dense tensor: `[batch, channels, height, width]`.
pub type Shape = [usize; 4];

pub(crate) fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// Dense row-major 4-D tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self, AutodiffError> {
        if data.len() != numel(&shape) {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); numel(&shape)],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; numel(&shape)],
            grad: None,
        }
    }

    /// A `[1, 1, 1, n]` vector.
    pub fn vector(values: Vec<T>) -> Self {
        Self {
            shape: [1, 1, 1, values.len()],
            data: values,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::vector(vec![value])
    }

    /// Builds a `[1, 1, h, w]` tensor from a row-major grid.
    pub fn from_grid(h: usize, w: usize, values: Vec<T>) -> Result<Self, AutodiffError> {
        Self::new([1, 1, h, w], values)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Replaces the gradient buffer. The buffer must match the data length.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<(), AutodiffError> {
        if grad.len() != self.data.len() {
            return Err(AutodiffError::DataLength {
                shape: self.shape,
                len: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![T::zero(); self.data.len()]);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T, AutodiffError> {
        if self.data.len() != 1 {
            return Err(AutodiffError::NotScalar { shape: self.shape });
        }
        Ok(self.data[0])
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    /// Element-type conversion; the gradient buffer is dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Copies out channel range `[start, end)`.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self, AutodiffError> {
        let [n, c, h, w] = self.shape;
        if start > end || end > c {
            return Err(AutodiffError::ChannelRange { start, end, channels: c });
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (end - start) * plane);
        for b in 0..n {
            let base = b * c * plane;
            out.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Self::new([n, end - start, h, w], out)
    }
}
