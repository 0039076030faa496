//! Dense `f64` tensors with a define-by-run reverse-mode tape.
//!
//! Only the operations needed by the image-translation networks are
//! provided: strided convolutions (im2col + GEMM), instance normalization,
//! pooling and resampling, and the handful of pointwise ops and reductions
//! the losses are built from.

mod graph;
mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
