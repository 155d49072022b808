//! Reverse-mode automatic differentiation over dense f64 tensors.

pub mod fd;
pub mod store;
pub mod tape;
pub mod tensor;

pub use fd::{finite_diff_check, FdReport};
pub use store::ParamStore;
pub use tape::{Gradients, MatLayout, Tape};
pub use tensor::Tensor;
