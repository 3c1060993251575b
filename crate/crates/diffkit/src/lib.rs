//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! The kernel is deliberately narrow: row-major tensors of rank at most three,
//! a tape ([`Graph`]) that records primitive applications in topological order,
//! and a backward pass that accumulates gradients into per-node buffers.
//! Convolutions are lowered to GEMM through an im2col buffer.
//!
//! Sequences are laid out time-major, `[t, channels]`. Convolution weights are
//! `[c_out, c_in, kernel]` and transposed-convolution weights `[c_in, c_out, kernel]`,
//! so that `deconv1d(·, w)` is exactly the adjoint of `conv1d(·, w)`.

mod error;
mod graph;
mod kernels;
mod scalar;
mod tensor;

pub use error::DiffError;
pub use graph::{Graph, Var};
pub use kernels::{conv_out_len, same_padding};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, DiffError>;

#[cfg(any(test, feature = "testing"))]
pub mod testing;
