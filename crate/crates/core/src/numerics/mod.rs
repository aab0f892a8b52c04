//! Dense arrays with reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major value. A [`Tape`] records every op of a
//! forward pass on [`Var`] handles and replays them in reverse on
//! [`Tape::backward`]. Model weights live in a [`ParamStore`]; binding them
//! to a tape with [`Tape::param`] makes their gradients flow back into the
//! store.

pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use kernels::{gemm, MatRef};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Tensor};

/// Number of elements for a shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
