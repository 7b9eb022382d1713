//! Dense tensors, a reverse-mode tape over them, and finite-difference
//! verification.

pub mod gradcheck;
pub mod kernels;
pub mod ops;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use params::{Grads, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Default epsilon for every layer normalization in the model.
pub const LN_EPS: f64 = 1e-5;
