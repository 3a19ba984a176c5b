//! Dense tensors and the reverse-mode tape used for training.

pub mod tape;
pub mod tensor;

pub use tape::{GradTape, Gradients, RowMix, Var};
pub use tensor::{sigmoid, softplus, Tensor};
