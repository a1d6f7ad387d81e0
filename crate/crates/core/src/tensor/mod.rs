//! Dense rank-4 tensors and a define-by-run reverse-mode tape.
//!
//! Values are plain [`Tensor`]s. Differentiable computation is recorded on a
//! [`Tape`], which refers to trainable weights held in a [`ParamStore`];
//! calling [`Tape::backward`] accumulates exact gradients into the store.

mod adam;
mod conv;
mod gradcheck;
mod params;
mod pool;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use conv::{conv2d_forward, ConvGeometry, Padding};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ProbeOutcome, ProbeResult};
pub use params::{ParamId, ParamStore, Parameter};
pub use pool::maxpool2d_forward;
pub use tape::{PointwiseKind, Tape, TapeStats, Var};

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: Shape,
        got: Shape,
    },
    #[error("data length {len} does not match shape {shape} ({} elements)", shape.numel())]
    LengthMismatch { shape: Shape, len: usize },
    #[error("conv2d: {channels} {side} channels not divisible by groups={groups}")]
    GroupsMismatch {
        side: &'static str,
        channels: usize,
        groups: usize,
    },
    #[error("conv2d: weight {weight} incompatible with input {input} at groups={groups}")]
    WeightMismatch {
        input: Shape,
        weight: Shape,
        groups: usize,
    },
    #[error("conv2d: kernel must be square, got {kh}x{kw}")]
    NonSquareKernel { kh: usize, kw: usize },
    #[error("conv2d: 'same' padding requires an odd kernel, got {kernel}")]
    EvenKernelSame { kernel: usize },
    #[error("conv2d: dilated kernel extent {extent} exceeds padded input {padded}")]
    KernelExceedsInput { extent: usize, padded: usize },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("maxpool2d: kernel {kernel} larger than input {h}x{w}")]
    PoolKernelTooLarge { kernel: usize, h: usize, w: usize },
    #[error("channel_split: sizes {sizes:?} do not sum to {channels} channels")]
    SplitSizes { sizes: Vec<usize>, channels: usize },
    #[error("backward: loss must be a scalar, got shape {0}")]
    NonScalarLoss(Shape),
    #[error("adam: moment buffers for parameter {0} do not match its shape")]
    OptimizerShape(String),
    #[error("grad_check: closure is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// `(N, C, H, W)` extents of a rank-4 tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape::new(1, 1, 1, 1);

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one `(H, W)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub const fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn with_n(self, n: usize) -> Self {
        Self { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Contiguous NCHW array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Standard-normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect();
        Self { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.shape.n && c < self.shape.c && h < self.shape.h && w < self.shape.w);
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = value;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest elementwise absolute difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
    }

    /// Bitwise equality of every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Copy of batch item `n` as a `1xCxHxW` tensor.
    pub fn item(&self, n: usize) -> Tensor {
        let len = self.shape.item();
        Tensor {
            shape: self.shape.with_n(1),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stack `1xCxHxW` (or larger) tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "stack",
            reason: "no tensors to stack".into(),
        })?;
        let base = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
        let mut n = 0;
        for t in items {
            if t.shape.with_n(base.n) != base {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    expected: base.with_n(t.shape.n),
                    got: t.shape,
                });
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: base.with_n(n),
            data,
        })
    }

    pub(crate) fn ensure_shape(&self, op: &'static str, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(TensorError::ShapeMismatch {
                op,
                expected,
                got: self.shape,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { len: 3, .. }));
    }

    #[test]
    fn stack_and_item_round_trip() {
        let a = Tensor::full(Shape::new(1, 2, 2, 2), 1.0);
        let b = Tensor::full(Shape::new(1, 2, 2, 2), 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 2));
        assert!(s.item(1).bit_eq(&b));
    }
}
