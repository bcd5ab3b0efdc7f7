//! Dense tensors, reverse-mode differentiation, sampling and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
mod ops;
pub mod rng;
mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var};
pub use ops::{argmax, categorical_sample, cross_entropy, matmul, softmax_rows};
pub use rng::SplitRng;
pub use tensor::Tensor;
