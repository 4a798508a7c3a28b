//! Minimal n-dimensional tensor with reverse-mode automatic differentiation.
//!
//! Every array in the diffusion toy (noisy latents, masks, condition latents,
//! network activations, parameters) is a [`Tensor`]. Operations record a
//! backward closure on the output when any input requires gradients; calling
//! [`Tensor::backward`] on a scalar loss walks the recorded graph in reverse
//! topological order and accumulates gradients into leaf tensors.
//!
//! The graph is owned by the tensors themselves: dropping the loss (and every
//! intermediate) after backward frees it.
//!
//! Broadcasting is never implicit. The two supported forms are explicit ops:
//! [`Tensor::add_trailing`] (operand matches the trailing axes) and
//! [`Tensor::add_leading`] (operand matches the leading axes).

mod error;
mod gemm;
mod ops;
mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use gemm::gemm;
pub use rng::Rng;
pub use tensor::{is_grad_enabled, no_grad, Tensor};

/// Scalar type used for every tensor element.
///
/// 32-bit by default. The `f64` feature switches to 64-bit, which is used for
/// tight gradient-check builds.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;
