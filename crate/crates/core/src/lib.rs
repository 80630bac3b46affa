//! Core of the pinlab workspace: a small dense tensor with tape-based
//! reverse-mode autodiff, the pixel / instance / pixel-instance
//! normalization family, the analytic instance-norm amplification model,
//! a toy style-based synthesis network, dissection procedures and a tiny
//! adversarial training loop.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! everything that touches the filesystem live in the `pinlab` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod amplification;
pub mod dissect;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
