//! Dense row-major tensors and a reverse-mode gradient tape.
//!
//! The tape records every operation as a node whose parents precede it, so a
//! single reverse sweep over the node list visits each node once. Values are
//! generic over [`Element`]: models train in `f32` and the gradient-check
//! harness re-runs the same code in `f64`.
//!
//! ```
//! use dae_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod element;
mod error;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
