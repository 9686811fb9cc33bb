//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! One [`Tape`] records one forward pass; [`Tape::backward`] consumes it.
//! Ops validate shapes up front and reject non-finite outputs immediately,
//! so a NaN is caught where it is produced rather than in a later loss.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::{AdError, AdResult, Tensor};
