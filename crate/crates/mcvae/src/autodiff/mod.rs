mod graph;
mod tensor;

pub mod gradcheck;

pub use graph::{Graph, Var, EPSILON};
pub use tensor::Tensor;
