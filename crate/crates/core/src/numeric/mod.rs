//! Dense tensors with tape-based reverse-mode differentiation, Adam and the
//! warm-up/cosine learning-rate schedule.

mod backward;
pub mod gradcheck;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use backward::Gradients;
pub use optim::{adam_step, lr_at, OptimizerState};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{ConvGeom, Tape, Var, BLOCKED};
pub use tensor::Tensor;
