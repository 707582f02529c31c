//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value: a shape, a flat data buffer and an optional
//! gradient slot. Differentiation happens in [`crate::graph::Graph`], which
//! copies leaf values in and hands gradients back out.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but data has {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("index {index} out of range for {op} (size {size})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("{0} requires at least one operand")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Accumulated gradient, same length as `data` when present.
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("zero-sized dimension");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("zero-sized dimension");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf.
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Returns a copy with a new shape over the same data.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
        })
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op: "dims2",
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[self.shape.len() - 1] + col]
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length");
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        grad.iter_mut().zip(delta).for_each(|(g, d)| *g += d);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
