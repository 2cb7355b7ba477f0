//! Reverse-mode automatic differentiation over dense `f64` tensors and the
//! first-order optimizers used to train every meta model.

mod optim;
mod tape;
mod tensor;

pub use optim::{optimizer_step, OptimizerMode, OptimizerState, BETA1, BETA2, EPSILON};
pub use tape::{NodeId, Primitive, Tape};
pub use tensor::Tensor;

pub(crate) use tape::{matmul, softmax_rows};
