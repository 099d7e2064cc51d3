//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Generic over the scalar type through [`crate::real::Real`]; end-to-end
//! runs use the f64 aliases at the crate root. Gradient correctness is
//! enforced by [`check::grad_check`] against central finite differences.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, grad_check_sampled, ScalarFn};
pub use graph::{Gradients, Graph, VarId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape {shape:?} does not fit {data_len} data values")]
    BadShape { shape: Vec<usize>, data_len: usize },
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected} entries, got {got}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tensor of shape {shape:?} used where rank <= 2 is required")]
    NotTwoD { shape: Vec<usize> },
    #[error("tensor of shape {shape:?} used where a scalar is required")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite values in {label}")]
    NonFinite { label: String },
    #[error("token id {index} outside table of size {vocab}")]
    TargetOutOfRange { index: usize, vocab: usize },
    #[error("cross entropy over an empty mask")]
    EmptyMask,
    #[error("concat of zero blocks")]
    EmptyConcat,
    #[error("column slice [{start}, {start}+{len}) outside width {cols}")]
    SliceOutOfRange {
        start: usize,
        len: usize,
        cols: usize,
    },
    #[error("softmax axis {axis} unsupported (rank-2 tensors have axes 0 and 1)")]
    BadAxis { axis: usize },
}
