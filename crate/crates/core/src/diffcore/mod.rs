//! Dense tensors, sparse operators and a reverse-mode tape: the minimal
//! differentiation core the model and losses are written against.

mod adam;
mod params;
mod sparse;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{reduce_grads, ParamGrads, ParamStore};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
