//! Minimal tensor and reverse-mode autodiff engine for small 2D image networks.
//!
//! Kernels run data-parallel over the batch axis through rayon when the
//! `parallel` feature is enabled and [`Parallelism::Rayon`] is selected;
//! [`Parallelism::Sequential`] gives a single-threaded path with identical
//! results.

mod float;
mod graph;
pub mod kernels;
pub mod nn;
mod par;
mod params;
mod tensor;

pub use float::Float;
pub use graph::{Gradients, Graph, Var};
pub use par::Parallelism;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("shape error: {0}")]
pub struct ShapeError(pub String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}
