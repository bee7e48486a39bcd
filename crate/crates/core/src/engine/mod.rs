//! Minimal reverse-mode differentiation for small classifiers.
//!
//! Supported layers: dense, 2-D convolution, relu, tanh, flatten, with a
//! softmax cross-entropy head. First-order gradients come from a hand-written
//! reverse pass; the mixed derivative `∂/∂x` of a function of `∇θ ℓ` comes
//! from running that same reverse pass on dual numbers.
//!
//! Relu uses subgradient 0 at the kink and has zero second derivative.

pub mod arch;
pub mod checkpoint;
mod kernels;
pub mod model;
pub mod objective;
pub mod scalar;

pub use arch::{Arch, Layer};
pub use model::{argmax, Classifier, GradVector, Grads, Want};
pub use objective::{matching_loss, matching_loss_grad, GradFn};
pub use scalar::{Dual, Precision, Scalar};
