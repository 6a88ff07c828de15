//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Graph`] records primitive ops as they are evaluated. [`Graph::backward`]
//! walks the tape once in reverse and [`finite_difference_check`] verifies the
//! result against central differences by replaying the forward pass.

mod array;
mod check;
mod graph;
pub mod ops;
mod real;

pub use array::Tensor;
pub use check::{finite_difference_check, finite_difference_check_all};
pub use graph::{Gradients, Graph, Var};
pub use ops::Op;
pub use real::Real;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("shape {shape:?} needs a different number of elements than {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}
