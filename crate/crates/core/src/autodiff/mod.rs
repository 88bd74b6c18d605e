//! Reverse-mode differentiation over dense `f64` tensors.

mod params;
mod tape;
mod tensor;

pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{NodeId, Tape, TapeError, TapeGrads};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;
#[cfg(test)]
pub(crate) use tape::sigmoid;

#[cfg(test)]
mod tests;
