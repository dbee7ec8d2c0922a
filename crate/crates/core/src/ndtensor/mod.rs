//! Dense tensors, reverse-mode differentiation, and the binary tensor container.

pub mod conv;
mod gradcheck;
mod graph;
pub mod io;
mod tensor;

pub use conv::ConvSpec;
pub use gradcheck::grad_check;
pub use graph::{Grads, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
