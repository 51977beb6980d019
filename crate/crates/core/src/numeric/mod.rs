//! Dense f64 tensors with reverse-mode gradients, Adam, gradient checking and
//! a versioned checkpoint format.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, GRAD_FLOOR};
pub use graph::{Graph, Mode, NodeId, LAYER_NORM_EPS};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tensor::{Gradients, ParamId, ParamStore, Tensor, TensorError};
