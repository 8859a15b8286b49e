//! Dense tensors, reverse-mode gradients and the Adam optimizer.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use graph::{Graph, Param, ParamId, ParamStore, Var};
pub use tensor::Tensor;
