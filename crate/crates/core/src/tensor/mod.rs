//! Dense `f32` tensors with tape-based reverse-mode differentiation.
//!
//! Parameters live in [`Tensor`]s owned by the model. A forward pass copies
//! them onto a fresh [`Tape`] as leaves, records every operation, and
//! [`Tape::backward`] replays the records in reverse. The resulting
//! [`Gradients`] are then accumulated into the parameter tensors'
//! `grad` fields; callers zero those between steps.

mod adam;
mod kernels;
mod tape;

pub use adam::{adam_step, Adam, AdamConfig, AdamMoments};
pub use tape::{Gradients, NodeId, Tape};

use thiserror::Error;

/// Marker stored in target matrices at positions that carry no prediction.
pub const IGNORE_INDEX: i64 = -100;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Large negative additive bias for masked attention keys.
pub const ATTENTION_MASK_VALUE: f32 = -1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {detail}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: i64,
        limit: usize,
    },
    #[error("{op}: axis {axis} invalid for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("masked cross-entropy: every target position is ignored")]
    EmptyBatch,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),
}

pub type TensorResult<T> = std::result::Result<T, TensorError>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite(op: &'static str, data: &[f32]) -> TensorResult<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// An n-dimensional row-major `f32` array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> TensorResult<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape,
                detail: "dimensions must be positive".into(),
            });
        }
        if data.len() != numel(&shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        check_finite("tensor", &data)?;
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A trainable tensor; its gradient buffer starts zeroed.
    pub fn parameter(shape: Vec<usize>, data: Vec<f32>) -> TensorResult<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(vec![0.0; t.data.len()]);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> TensorResult<Self> {
        let n = numel(&shape);
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f32) -> TensorResult<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on && self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op for non-trainable tensors.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> TensorResult<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.data.len() {
            return Err(TensorError::DataLength {
                len: delta.len(),
                shape: self.shape.clone(),
            });
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += *b;
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad
            .as_ref()
            .map(|g| g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>())
            .unwrap_or(0.0)
            .sqrt()
    }

    /// Split borrow of values and gradient, used by optimizers.
    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [f32], Option<&[f32]>) {
        (&mut self.data, self.grad.as_deref())
    }
}

/// Zeroes the gradient buffers of every tensor in `params`.
pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut Tensor>) {
    for p in params {
        p.zero_grad();
    }
}
