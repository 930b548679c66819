//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Forward operations append nodes to a [`Tape`]; [`Tape::backward`] walks
//! the record in reverse and accumulates analytic gradients for every leaf.
//! Everything is 64-bit and single-threaded per tape; independent tapes can
//! run on separate threads.

mod checkpoint;
pub mod gradcheck;
mod tape;
mod tensor;

pub use checkpoint::{load_params, save_params, ParamSet};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
