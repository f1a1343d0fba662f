//! Dense tensors, reverse-mode autodiff, AdamW and gradient checking.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use optim::{warmup_lr, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Epsilon inside RMS normalisation.
pub const RMS_EPS: f64 = 1e-8;
