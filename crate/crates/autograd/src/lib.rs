//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] returns
//! gradients for every node. Model weights live in a [`ParamStore`] and are
//! bound to a tape with [`Tape::param`].

pub mod check;
mod params;
mod tape;

pub use params::{GradBuffer, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

pub use ndarray;
