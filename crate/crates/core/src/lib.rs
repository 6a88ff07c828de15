//! Compositional zero-shot recognition of attribute-object pairs through
//! key-query message passing between primitive concepts.
//!
//! The [`tensor`] module is a small reverse-mode autodiff engine; everything
//! else builds the model, its training objective and the evaluation protocol
//! on top of it.

pub mod checkpoint;
pub mod concept;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod universe;
pub mod visual;

pub use error::{Error, Result};
