//! Dense-tensor reverse-mode automatic differentiation.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Grads, Var};
pub use params::{Gradients, NamedTensor, ParamId, ParamStore};
pub use tensor::Tensor;
