//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The element type is generic: training runs at `f32`, gradient checks
//! instantiate the same graphs at `f64`. A [`Graph`] is a tape confined to one
//! worker; distinct graphs (one per training step or per generated melody) may
//! run concurrently.

mod data;
mod graph;
pub mod checkpoint;
pub mod optim;

pub use data::{Scalar, TensorData};
pub use graph::{Gradients, Graph, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("target class {target} out of range for {classes} classes")]
    BadTarget { target: usize, classes: usize },
    #[error("loss is not connected to any differentiable input")]
    DisconnectedGraph,
    #[error("backward requires a scalar loss, got {0} elements")]
    NonScalarLoss(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;
