//! Dense tensors, reverse-mode autodiff, AdamW and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, ParamGroup, Parameters, Trainable};
pub use optim::{adamw_step, AdamWState, Moments, OptimizerConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, softmax, Tensor};
