//! Core algorithms for learned shadow removal.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std` (an allocator is required). File formats, the command
//! line and wall-clock benchmarking live in the companion `umbra` crate.
//!
//! * [`imaging`]: image containers, CIELAB conversion, crops, error maps.
//! * [`synthesis`]: affine shade model, alpha compositing, procedural mattes.
//! * [`maskdissoc`]: exact Euclidean distance transform and body/detail masks.
//! * [`autodiff`]: a small reverse-mode tensor graph, Adam and a gradient checker.
//! * [`model`]: encoder/decoder with prior and posterior latent heads.
//! * [`losses`]: enhancement, KL, boundary and total training losses.
//! * [`training`]: batch sampling and the single training step.
//! * [`metrics`]: PSNR, SSIM, LAB error, NRSS.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
mod error;
pub mod imaging;
pub mod losses;
pub mod maskdissoc;
pub mod metrics;
pub mod model;
mod real;
pub mod rng;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
