//! Dense matrices, reverse-mode differentiation, Adam, and the parameter
//! archive format.

pub mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use params::{Adam, Param, ParamStore};
pub use tape::{Gradients, Neighbors, Tape, Var};
pub use tensor::Tensor;
