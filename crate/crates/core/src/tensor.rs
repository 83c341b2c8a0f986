//! Dense row-major f64 tensors.
//!
//! Conventions used throughout the crate:
//! * matrices are `[rows, cols]`,
//! * scene grids and feature maps are `[H, W, C]` with the channel fastest,
//! * temporal-convolution kernels are `[width, in_dim, out_dim]`,
//! * 2-D convolution kernels are `[kh, kw, in_ch, out_ch]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by kernel operations.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelError {
    /// Operand shapes are incompatible; names both shapes.
    Shape { op: &'static str, detail: String },
    /// An input or result violated the finiteness invariant.
    NonFinite { op: &'static str, detail: String },
    /// A call broke an operation's contract (non-scalar backward root,
    /// zero step size, non-deterministic closure, ...).
    Contract { op: &'static str, detail: String },
}

impl fmt::Display for KernelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelError::Shape { op, detail } => write!(f, "{op}: shape error: {detail}"),
            KernelError::NonFinite { op, detail } => write!(f, "{op}: non-finite: {detail}"),
            KernelError::Contract { op, detail } => write!(f, "{op}: contract violation: {detail}"),
        }
    }
}

impl core::error::Error for KernelError {}

pub(crate) fn shape_err(op: &'static str, detail: String) -> KernelError {
    KernelError::Shape { op, detail }
}

/// A dense tensor: shape plus a flat row-major array of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, KernelError> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err("tensor", format!("zero-sized dim in {shape:?}")));
        }
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} wants {n} entries, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Single entry of a scalar tensor.
    pub fn item(&self) -> Result<f64, KernelError> {
        if self.data.len() != 1 {
            return Err(shape_err(
                "item",
                format!("expected scalar, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Squared L2 norm of all entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn fill(&mut self, x: f64) {
        for v in &mut self.data {
            *v = x;
        }
    }

    /// Row `r` of a `[rows, cols]` matrix as a vector tensor.
    pub fn row(&self, r: usize) -> Result<Tensor, KernelError> {
        if self.shape.len() != 2 {
            return Err(shape_err("row", format!("want matrix, got {:?}", self.shape)));
        }
        let cols = self.shape[1];
        if r >= self.shape[0] {
            return Err(shape_err(
                "row",
                format!("row {r} out of bounds for {:?}", self.shape),
            ));
        }
        Ok(Tensor::vector(self.data[r * cols..(r + 1) * cols].to_vec()))
    }
}
