//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in execution order. [`Var`] handles are
//! cheap `Copy` indices into the tape; calling [`Var::backward`] on a scalar
//! sweeps the tape once in reverse and accumulates gradients into every leaf
//! created with [`Tape::param`].

mod check;
mod ops;
mod tape;

pub use check::{check_gradient, check_gradient_multi};
pub use ops::softplus;
pub use ops::{concat, nearest_interpolate_adjoint, nearest_interpolate_values};
pub use tape::{nearest_source, Tape, Var};
