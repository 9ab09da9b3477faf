//! Dense channel-major rank-3 tensors and convolution parameter blocks.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channels × height × width array stored channel-major, then row, then column.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("tensor dimensions must be positive, got {channels}x{height}x{width}")));
        }
        let expected = channels
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::Shape("tensor dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} tensor needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn full(channels: usize, height: usize, width: usize, value: T) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "tensor dimensions must be positive");
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::full(channels, height, width, T::zero())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.channels, other.height, other.width)
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut t = Self::zeros(channels, height, width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    t.data[(c * height + y) * width + x] = f(c, y, x);
                }
            }
        }
        t
    }

    /// A 1×1×1 tensor carrying a scalar.
    pub fn scalar(value: T) -> Self {
        Self { channels: 1, height: 1, width: 1, data: vec![value] }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies channels `range` into a new tensor.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.channels {
            return Err(Error::Shape(format!("channel range {range:?} out of bounds for {} channels", self.channels)));
        }
        let n = self.plane_len();
        let data = self.data[range.start * n..range.end * n].to_vec();
        Self::new(range.end - range.start, self.height, self.width, data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::narrow(v.widen())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.widen()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.widen().abs()))
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

/// Weights and bias of a stride-1 "same"-padded convolution.
///
/// Weights are laid out `out × in × k × k` with `k` either 3 or 1. The same
/// type carries parameter gradients and optimizer velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(out_channels: usize, in_channels: usize, kernel: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if kernel != 3 && kernel != 1 {
            return Err(Error::Config(format!("kernel must be 3x3 or 1x1, got {kernel}x{kernel}")));
        }
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::Config("convolution channel counts must be positive".into()));
        }
        let n = out_channels * in_channels * kernel * kernel;
        if weights.len() != n {
            return Err(Error::Config(format!(
                "{out_channels}x{in_channels}x{kernel}x{kernel} kernel needs {n} weights, got {}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::Config(format!("expected {out_channels} bias values, got {}", bias.len())));
        }
        Ok(Self { out_channels, in_channels, kernel, weights, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Result<Self> {
        let n = out_channels * in_channels * kernel * kernel;
        Self::new(out_channels, in_channels, kernel, vec![T::zero(); n], vec![T::zero(); out_channels])
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            out_channels: other.out_channels,
            in_channels: other.in_channels,
            kernel: other.kernel,
            weights: vec![T::zero(); other.weights.len()],
            bias: vec![T::zero(); other.bias.len()],
        }
    }

    /// 3×3 kernel that copies input channel `c` to output channel `c`.
    pub fn identity3x3(channels: usize) -> Self {
        let mut p = Self::zeros(channels, channels, 3).expect("valid shape");
        for c in 0..channels {
            let idx = p.weight_index(c, c, 1, 1);
            p.weights[idx] = T::one();
        }
        p
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    #[inline]
    pub fn kernel(&self) -> usize {
        self.kernel
    }

    #[inline]
    pub fn weight_index(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_channels + ic) * self.kernel + ky) * self.kernel + kx
    }

    pub fn weight(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> T {
        self.weights[self.weight_index(oc, ic, ky, kx)]
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    /// Mutable weights and bias at once.
    pub fn split_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.weights, &mut self.bias)
    }

    /// Trainable scalar count.
    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.out_channels == other.out_channels && self.in_channels == other.in_channels && self.kernel == other.kernel
    }

    /// Weight dimensions `[out, in, k, k]`.
    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel: self.kernel,
            weights: self.weights.iter().map(|&v| U::narrow(v.widen())).collect(),
            bias: self.bias.iter().map(|&v| U::narrow(v.widen())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}
