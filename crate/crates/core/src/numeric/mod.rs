//! Deterministic tensor kernels, a reverse-mode tape, the finite-difference
//! gradient oracle and the checkpoint container.

pub mod container;
pub mod gradcheck;
pub mod kernels;
mod matrix;
pub mod tape;

pub use container::{DType, TensorFile};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use kernels::{layer_norm, matmul, softmax_rows, softmax_rows_masked, Mask};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};
