//! Numerical core for isotropy-regularized supervised pre-training.
//!
//! Everything here is `no_std` + `alloc` and fully deterministic: all
//! transcendental functions go through `libm`, and randomness comes from a
//! single documented generator ([`numcore::Rng`]). File formats, timing and
//! the command line live in the companion `isolab` crate.
//!
//! Module map:
//!
//! * [`numcore`]: dense matrices, the seeded generator, a reverse-mode tape
//!   and finite-difference gradient checking.
//! * [`geometry`]: centering, covariance/correlation, a Jacobi eigensolver,
//!   the partition-function isotropy metric and PCA whitening.
//! * [`model`]: hashing tokenizer, mean-pooled MLP encoder with dropout and
//!   optional batch normalization, and the linear softmax head.
//! * [`objectives`]: cross-entropy, the contrastive and correlation
//!   regularizers, covariance-target variants, L2 and their composition.
//! * [`training`]: Adam and the early-stopped pre-training loop.
//! * [`fewshot`]: episode sampling, the logistic-regression probe and
//!   episodic evaluation.
//! * [`data`]: labelled datasets, domain splits and the synthetic corpus.

#![no_std]
#![forbid(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
mod error;
pub mod fewshot;
pub mod geometry;
pub mod model;
pub mod numcore;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
pub use numcore::{Matrix, Rng};
