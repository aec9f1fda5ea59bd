//! Minimal differentiable-computation kernel: dense tensors, forward ops,
//! reverse-mode gradients, and the Adam optimizer.

pub mod adam;
pub mod checkpoint;
mod error;
mod graph;
pub mod init;
pub mod linalg;
mod params;
mod real;
mod tensor;

pub use adam::Adam;
pub use error::{KernelError, Result};
pub use graph::{Graph, NodeId};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
