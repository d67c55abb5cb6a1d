//! Dense rank-3 tensors and the handful of kernels the architectures need.
//!
//! Layout is row-major `(h, w, c)`: the channel index moves fastest. There is
//! no batch dimension.

mod ops;
mod tape;

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::{
    bilinear_up2, concat_channels, conv1x1, conv2d, conv_output_dim, depth_to_space, maxpool_down2, silu,
    space_to_depth, sum_tensors,
};
pub use tape::{Gradients, ParamId, Tape, Var};

/// Floating-point element type usable by the engine.
pub trait Element: Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + Send + Sync + 'static {
    const PRECISION: Precision;
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Single;
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Double;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

/// Spatial extent and channel count of a feature map.
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

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("tensor dimensions must be positive, got {0}")]
    ZeroDimension(Shape),
    #[error("data length {actual} does not match {expected} elements")]
    DataLength { expected: usize, actual: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("channel mismatch: expected {expected}, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("convolution of {input} with {kernel_h}x{kernel_w} kernel (stride {stride}, padding {padding}) has no output pixels")]
    NonPositiveOutput {
        input: Shape,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    #[error("stride must be positive")]
    ZeroStride,
    #[error("expected a 1x1 kernel, got {kernel_h}x{kernel_w}")]
    NotPointwise { kernel_h: usize, kernel_w: usize },
    #[error("spatial dims {height}x{width} not divisible by {block}")]
    NotDivisible { height: usize, width: usize, block: usize },
    #[error("channels {channels} not divisible by {divisor}")]
    ChannelsNotDivisible { channels: usize, divisor: usize },
    #[error("spatial mismatch: {expected} vs {actual}")]
    SpatialMismatch { expected: Shape, actual: Shape },
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape, actual: Shape },
    #[error("operation needs at least one input")]
    EmptyInput,
    #[error("unknown tape variable {0}")]
    UnknownVar(usize),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Immutable `(h, w, c)` feature map.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor, rejecting zero dims, wrong lengths and non-finite values.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(height, width, channels);
        let t = Self::from_shape_vec(shape, data)?;
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(t)
    }

    /// Like [`Tensor::new`] without the finiteness scan.
    pub fn from_shape_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() == 0 {
            return Err(TensorError::ZeroDimension(shape));
        }
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_raw(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: Shape, value: T) -> Result<Self> {
        Self::from_shape_vec(shape, vec![value; shape.numel()])
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones_like(other: &Tensor<T>) -> Self {
        Self::from_raw(other.shape, vec![T::one(); other.data.len()])
    }

    /// Fills by evaluating `f(y, x, c)` at every position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        if shape.numel() == 0 {
            return Err(TensorError::ZeroDimension(shape));
        }
        let mut data = Vec::with_capacity(shape.numel());
        for y in 0..shape.height {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Ok(Self { shape, data })
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.width + x) * self.shape.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    /// Channel vector at pixel `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let start = self.index(y, x, 0);
        &self.data[start..start + self.shape.channels]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_raw(
            self.shape,
            self.data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero))
                .collect(),
        )
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Copies channels `[start, start + len)` into a new tensor.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.channels {
            return Err(TensorError::ChannelMismatch {
                expected: start + len,
                actual: self.shape.channels,
            });
        }
        let shape = Shape::new(self.shape.height, self.shape.width, len);
        let mut data = Vec::with_capacity(shape.numel());
        for px in self.data.chunks_exact(self.shape.channels) {
            data.extend_from_slice(&px[start..start + len]);
        }
        Ok(Self::from_raw(shape, data))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &format_args!("{}", self.shape))
            .field("data", &self.data)
            .finish()
    }
}

/// Convolution filters in `(out, in, kh, kw)` order plus optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T = f32> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub values: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Element> ConvWeights<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        values: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        let expected = out_channels * in_channels * kernel_h * kernel_w;
        if expected == 0 {
            return Err(TensorError::ZeroDimension(Shape::new(
                kernel_h,
                kernel_w,
                in_channels * out_channels,
            )));
        }
        if values.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                actual: values.len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(TensorError::DataLength {
                    expected: out_channels,
                    actual: b.len(),
                });
            }
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            values,
            bias,
        })
    }

    /// `c -> c` pointwise identity with zero bias.
    pub fn identity(channels: usize) -> Self {
        let mut values = vec![T::zero(); channels * channels];
        for c in 0..channels {
            values[c * channels + c] = T::one();
        }
        Self {
            out_channels: channels,
            in_channels: channels,
            kernel_h: 1,
            kernel_w: 1,
            values,
            bias: Some(vec![T::zero(); channels]),
        }
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx
    }

    pub fn weight_count(&self) -> usize {
        self.values.len()
    }

    /// Weights plus bias entries.
    pub fn param_count(&self) -> usize {
        self.values.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![T::zero(); self.values.len()],
            bias: self.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
            ..*self
        }
    }

    pub fn cast<U: Element>(&self) -> ConvWeights<U> {
        let conv = |v: &T| U::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or_else(U::zero);
        ConvWeights {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            values: self.values.iter().map(conv).collect(),
            bias: self.bias.as_ref().map(|b| b.iter().map(conv).collect()),
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
