//! Reverse-mode automatic differentiation over dense 64-bit tensors.
//!
//! A [`Tape`] records operations as they are evaluated eagerly. Calling
//! [`Tape::backward`] walks the record in reverse and returns a gradient for
//! every differentiable leaf. Every operation checks its output for
//! non-finite values, so a NaN never silently flows into a gradient.
//!
//! The tape is generic over its [`Scalar`]. Running the same expression on
//! [`Dual`] numbers whose tangents hold a direction `v` turns the reverse pass
//! into a Hessian-vector product, which is how second-order meta-gradients
//! are obtained.
//!
//! ```
//! use rml_adapt::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let theta = tape.param(Tensor::scalar(1.0)).unwrap();
//! let sq = tape.mul(theta, theta).unwrap();
//! let half = tape.scale(sq, 0.5).unwrap();
//! let grads = tape.backward_scalar(half).unwrap();
//! assert_eq!(grads.get(theta).unwrap().item(), 1.0);
//! ```

mod scalar;
mod tape;
mod tensor;

pub use scalar::{Dual, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{softmax_rows, Tensor};
