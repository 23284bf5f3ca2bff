//! Dense-tensor reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass and replays it in
//! reverse to produce gradients. Tapes are rebuilt for each training step;
//! trainable values live in a [`ParamStore`] and are pulled onto a tape with
//! [`Tape::param`]. [`Adam`] updates a store from accumulated [`GradBuffer`]s.
//!
//! The heavy kernels (matrix products and convolutions) split their output
//! rows across a rayon pool when the `parallel` feature is enabled and
//! [`parallel::set_enabled`] has not switched it off. Every output element is
//! computed by the same instruction sequence in both modes, so results are
//! bit-identical whether or not the pool is used.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod parallel;
mod param;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{AdError, Result};
pub use param::{GradBuffer, ParamId, ParamStore};
pub use tape::{Conv2dSpec, Gradients, Tape, Var};
pub use tensor::{Precision, Tensor};
