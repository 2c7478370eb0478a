//! Minimal reverse-mode differentiable array engine.

mod array;
pub mod fused;
mod gradcheck;
pub mod kernels;
mod tape;

pub use array::{numel, strides_of, Array, Real, EPS};
pub use kernels::{PatchPlan, Tap};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use tape::{Gradients, Tape, Var};
