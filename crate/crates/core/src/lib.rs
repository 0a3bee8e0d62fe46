//! Numerical weak KAM theory on periodic grids.
//!
//! Discrete actions are tabulated on a window of admissible jumps, the
//! Lax-Oleinik operators act on grid functions, and the solvers recover the
//! effective action, weak KAM solutions, discounted solutions and the
//! selected limit together with minimizing measures.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod continuum;
pub mod error;
pub mod grid;
pub mod laxoleinik;
pub mod mather;
pub mod models;
pub mod solvers;

pub use error::{Result, WeakKamError};
