//! Dense f64 tensors with reverse-mode gradient computation.
//!
//! Storage is row-major `Vec<f64>`. Gradients are computed by recording
//! primitive operations on a [`Tape`] and replaying them in reverse.
//! Non-finite values are rejected at operation boundaries rather than
//! propagated.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
#[doc(hidden)]
pub use self::matmul_raw as matmul_raw_bench;
pub use tape::{Activation, Tape, TensorId};

use std::fmt;

pub type TensorResult<T> = Result<T, TensorError>;

/// Errors emitted by tensor construction and tape operations.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Two operands have incompatible shapes; both are named in the message.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Data buffer length does not match the product of the shape extents.
    DataLength { expected: usize, got: usize },
    /// An operation produced or received a NaN/Inf value.
    NonFinite { op: &'static str },
    /// `backward` requires a single-element tensor.
    NotAScalar { op: &'static str, shape: Vec<usize> },
    /// `backward` was called twice without resetting gradients.
    BackwardTwice,
    /// A cross-entropy target id is outside the vocabulary.
    TargetOutOfVocab {
        position: usize,
        target: usize,
        vocab: usize,
    },
    /// Cross-entropy over a fully masked sequence has no defined mean.
    AllMasked,
    /// Catch-all for invalid arguments (empty shapes, bad axes, bad ranges).
    InvalidArg { op: &'static str, msg: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch: left={left:?}, right={right:?}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::NonFinite { op } => {
                write!(f, "{op}: non-finite value encountered")
            }
            TensorError::NotAScalar { op, shape } => {
                write!(f, "{op}: expected scalar, got shape {shape:?}")
            }
            TensorError::BackwardTwice => {
                write!(f, "backward called twice without reset_grads")
            }
            TensorError::TargetOutOfVocab {
                position,
                target,
                vocab,
            } => {
                write!(
                    f,
                    "cross_entropy: target {target} at position {position} is outside vocab of size {vocab}"
                )
            }
            TensorError::AllMasked => {
                write!(f, "cross_entropy: every position is masked out")
            }
            TensorError::InvalidArg { op, msg } => write!(f, "{op}: {msg}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major f64 array. Immutable after creation except for the
/// gradient buffer, which is populated by a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/data invariants and rejecting
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidArg {
                op: "tensor",
                msg: format!("extents must be positive, got {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        if !all_finite(&data) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> TensorResult<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub(crate) fn all_finite(data: &[f64]) -> bool {
    data.iter().all(|v| v.is_finite())
}

// ── Raw kernels ──────────────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n], row-major, out overwritten.
///
/// Backed by `matrixmultiply::dgemm`; results are deterministic for a given
/// shape on a given machine (fixed blocking and accumulation order).
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    // Safety: pointers and row-major strides cover exactly the asserted
    // lengths, and the buffers do not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// B[n×m] = transpose of A[m×n].
pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}
