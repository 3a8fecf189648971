//! Minimal dense-tensor arithmetic with reverse-mode differentiation.
//!
//! Values live in [`Tensor`]s; differentiable computation is recorded on a
//! [`Tape`] and swept backwards once by [`Tape::backward`]. Model weights sit
//! in a [`ParamStore`] and are borrowed onto a tape per forward pass, which
//! keeps frozen-model evaluation free of shared mutation.

pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{fd_check, FdOptions};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Grads, Tape, Var};
pub use tensor::{argmax, sigmoid, softmax_slice, Tensor};
