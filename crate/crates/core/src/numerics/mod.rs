//! Dense tensors, a recording tape for reverse-mode gradients, a finite
//! difference checker, and the Adam optimizer.

mod adam;
mod gradcheck;
pub mod init;
pub mod kernels;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_tensor, Coverage, GradCheckReport};
pub use real::Real;
pub use tape::{bilinear_taps, BilinearTaps, Gradients, GridRect, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
