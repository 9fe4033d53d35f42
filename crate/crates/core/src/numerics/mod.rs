//! Dense `f64` tensors with a reverse-mode tape.
//!
//! Ops are recorded on a [`Tape`] as they run and differentiated by a single
//! reverse sweep. [`Tape::stop_gradient`] gives a forward identity that blocks
//! the adjoint, which is how the weight-function ablations are expressed.
//! Any op that produces NaN or infinity fails with [`Error::NonFinite`]
//! instead of propagating it.
//!
//! [`Error::NonFinite`]: crate::error::Error::NonFinite

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{log_sum_exp, softmax_row, Gradients, Tape, Var};
pub use tensor::Tensor;
