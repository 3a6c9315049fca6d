//! Dense row-major tensors and the differentiable ops built on them.
//!
//! Shapes are dynamic (`Vec<usize>`); the handful of layer functions each
//! validate the ranks and extents they need and report the offending axis.
//! All kernels accumulate in a fixed order so results are bitwise
//! reproducible across runs and thread counts. `f32` is the training dtype;
//! `f64` exists for finite-difference gradient checking.

mod conv;
mod dense;
pub mod gradcheck;
mod optim;
mod pool;

pub use conv::{conv3d_backward, conv3d_forward, Conv3dGrads, Conv3dSpec};
pub use dense::{
    linear_backward, linear_forward, relu, relu_backward, softmax_cross_entropy, softmax_rows,
};
pub use optim::{sgd_momentum_step, OptimState};
pub use pool::{maxpool3d, maxpool3d_backward};

use std::fmt;

use thiserror::Error;

/// Element types tensors can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Floating-point element trait for tensor kernels.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Default + fmt::Debug + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("{context}: axis {axis} expected extent {expected}, got {actual}")]
    AxisMismatch {
        context: &'static str,
        axis: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{context}: expected rank {expected}, got shape {actual:?}")]
    RankMismatch {
        context: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },
    #[error("{context}: axis {axis} extent {extent} smaller than required {required}")]
    ExtentTooSmall {
        context: &'static str,
        axis: usize,
        extent: usize,
        required: usize,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{context}: data length {actual} does not match shape volume {expected}")]
    DataLength {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{context}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        context: &'static str,
        label: usize,
        classes: usize,
    },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
}

/// Dense row-major tensor. The last axis is contiguous.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, {:?}, ...]", self.data[0], self.data[1])
        }
    }
}

fn checked_volume(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank zero is not supported".into(),
        });
    }
    let mut vol: usize = 1;
    for &extent in shape {
        if extent == 0 {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: "zero extent".into(),
            });
        }
        vol = vol.checked_mul(extent).ok_or_else(|| TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "volume overflows usize".into(),
        })?;
    }
    Ok(vol)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let vol = checked_volume(shape)?;
        if data.len() != vol {
            return Err(TensorError::DataLength {
                context: "Tensor::new",
                expected: vol,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let vol = checked_volume(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); vol],
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self, TensorError> {
        let vol = checked_volume(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; vol],
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self, TensorError> {
        let vol = checked_volume(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..vol).map(&mut f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Consumes the tensor, yielding its backing buffer. Useful for
    /// reshaping without a copy: `Tensor::new(new_shape, t.into_data())`.
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    /// Interprets the tensor as rank 5 and returns its extents.
    pub fn dims5(&self, context: &'static str) -> Result<[usize; 5], TensorError> {
        if self.shape.len() != 5 {
            return Err(TensorError::RankMismatch {
                context,
                expected: 5,
                actual: self.shape.clone(),
            });
        }
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3], self.shape[4]])
    }

    /// Interprets the tensor as rank 2 and returns its extents.
    pub fn dims2(&self, context: &'static str) -> Result<[usize; 2], TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                context,
                expected: 2,
                actual: self.shape.clone(),
            });
        }
        Ok([self.shape[0], self.shape[1]])
    }

    pub fn dims1(&self, context: &'static str) -> Result<usize, TensorError> {
        if self.shape.len() != 1 {
            return Err(TensorError::RankMismatch {
                context,
                expected: 1,
                actual: self.shape.clone(),
            });
        }
        Ok(self.shape[0])
    }

    /// Elementwise cast into another scalar type (via f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Requires matching shapes; returns an axis-level mismatch otherwise.
    pub fn same_shape(&self, other: &Tensor<T>, context: &'static str) -> Result<(), TensorError> {
        if self.shape.len() != other.shape.len() {
            return Err(TensorError::RankMismatch {
                context,
                expected: self.shape.len(),
                actual: other.shape.clone(),
            });
        }
        for (axis, (&a, &b)) in self.shape.iter().zip(other.shape.iter()).enumerate() {
            if a != b {
                return Err(TensorError::AxisMismatch {
                    context,
                    axis,
                    expected: a,
                    actual: b,
                });
            }
        }
        Ok(())
    }
}

/// Number of vector lanes used by the deterministic dot product below.
const DOT_LANES: usize = 8;

/// Dot product with a fixed lane structure.
///
/// Elements are folded into eight independent accumulators (letting the
/// compiler vectorize the loop) which are then combined in one fixed tree.
/// The summation order depends only on the slice length, never on the
/// caller, so results are bitwise stable.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); DOT_LANES];
    let chunks = a.len() / DOT_LANES;
    for i in 0..chunks {
        let ao = &a[i * DOT_LANES..][..DOT_LANES];
        let bo = &b[i * DOT_LANES..][..DOT_LANES];
        for k in 0..DOT_LANES {
            lanes[k] = lanes[k] + ao[k] * bo[k];
        }
    }
    let mut tail = T::zero();
    for i in chunks * DOT_LANES..a.len() {
        tail = tail + a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// `dst += scale * src`, elementwise over equal-length slices.
pub(crate) fn axpy<T: Scalar>(dst: &mut [T], scale: T, src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d = *d + scale * s;
    }
}
