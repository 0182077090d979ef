//! Gradient-based features from pre-trained convolutional networks.
//!
//! A frozen backbone `f` with parameters split into bottom (`theta1`) and
//! top (`theta2`) layers yields two kinds of features for a linear model:
//! the activations `f(x)` and the per-sample Jacobian products
//! `omega^T J_theta2(x)`. The model
//!
//! ```text
//! g(x) = w1^T f(x) + omega^T J_theta2(x) w2
//! ```
//!
//! is evaluated without materializing `J` by propagating a tangent alongside
//! the primal pass ([`tangent::jvp_forward`]) and trained with a single
//! reverse pass ([`tangent::vjp_theta2`]).
//!
//! Modules:
//! - [`tensor`], [`ops`], [`tape`]: storage, operators, reverse-mode tape.
//! - [`netdef`]: architectures, parameters, NTK parametrization, checkpoints.
//! - [`tangent`]: the JVP/VJP through theta2.
//! - [`gradfeat`]: activation, gradient and full linear models, fine-tuning.
//! - [`oracle`]: 64-bit brute-force references (finite differences,
//!   explicit Jacobians, Taylor residuals).
//! - [`harness`]: datasets, pre-training, the ablation grid and reports.

pub mod error;
pub mod gradfeat;
pub mod harness;
pub mod netdef;
pub mod oracle;
pub mod ops;
pub mod rng;
pub mod tangent;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
