//! Core numerics and models for all-in-one image restoration with latent
//! degradation priors.
//!
//! The crate is `no_std` with `alloc`; the default `std` feature only turns
//! on runtime CPU dispatch in the GEMM backend.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autograd;
pub mod degradations;
pub mod error;
pub mod kernels;
pub mod latent_prior;
pub mod metrics;
pub mod nn;
pub mod real;
pub mod restoration;
pub mod seed;
pub mod tensor;
pub mod training;

pub use autograd::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::Tensor;
