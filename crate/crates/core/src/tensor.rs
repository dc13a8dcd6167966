//! Dense row-major f64 tensors.
//!
//! Shapes are rank 1 or 2; scalars are represented as shape `[1]`. The
//! invariant `shape.iter().product() == data.len()` holds for every
//! constructed value.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// Shape product does not match the data length.
    ShapeData { shape: Vec<usize>, len: usize },
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Operand has the wrong rank or an out-of-range index for the operation.
    BadOperand { op: &'static str, detail: String },
    /// `backward` requires a scalar (single-element) loss node.
    NotScalar { shape: Vec<usize> },
    /// `backward` was called twice without an intervening gradient reset.
    BackwardWithoutReset,
}

impl core::fmt::Display for NumericsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NumericsError::ShapeData { shape, len } => {
                write!(f, "shape {shape:?} does not describe {len} elements")
            }
            NumericsError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            NumericsError::BadOperand { op, detail } => write!(f, "{op}: {detail}"),
            NumericsError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            NumericsError::BackwardWithoutReset => {
                write!(f, "backward called twice without resetting gradients")
            }
        }
    }
}

impl core::error::Error for NumericsError {}

/// Row-major dense tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    /// Populated by the optimizer path after a backward pass; same length as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() {
            return Err(NumericsError::ShapeData {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian-initialized tensor with mean 0 and the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows for rank-2 tensors; 1 for rank-1.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Number of columns for rank-2 tensors; the length for rank-1.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Zeroes the gradient slot, allocating it if absent.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Euclidean norm of the data.
    pub fn l2(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }
}
