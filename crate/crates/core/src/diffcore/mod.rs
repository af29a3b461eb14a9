//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamRegistry`] and are copied onto the tape as leaves, so any number of
//! tapes may read the same registry concurrently.

mod registry;
mod tape;
mod tensor;

pub use registry::{zero_grads, Init, Param, ParamId, ParamRegistry};
pub use tape::{NodeId, Tape};
pub use tensor::{Scalar, Tensor};
