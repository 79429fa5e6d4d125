//! Dense matrices with reverse-mode differentiation, Adam, checkpoints and
//! a finite-difference gradient oracle.

pub mod checkpoint;
mod gradcheck;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport, DEFAULT_STEP};
pub use checkpoint::Checkpoint;
pub use optim::{adam_step, LrSchedule, OptimizerState};
pub use tape::{Activation, Axis, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;
