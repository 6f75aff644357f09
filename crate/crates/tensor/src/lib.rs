//! Minimal dense tensor engine with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; calling
//! [`Tape::backward`] on a scalar result returns the gradients of all leaves
//! created with [`Tape::leaf`]. Tensors are generic over [`Float`] so the same
//! code runs in `f32` for training and in `f64` for gradient checks.
//!
//! ```
//! use vdpm_tensor::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
//! let loss = x.mul(x).unwrap().sum_all();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod error;
mod float;
pub mod gradcheck;
pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use float::Float;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, Tensor};
