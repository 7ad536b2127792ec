//! Core engine for decomposing toy neural networks into parameter components.
//!
//! The crate is organised around five layers:
//!
//! - [`numerics`]: dense matrices, a seeded counter-based RNG, a reverse-mode
//!   gradient engine over a fixed op set, one-sided Jacobi SVD, Adam/AdamW,
//!   and learning-rate schedules.
//! - [`models`]: the toy architectures (TMS, residual MLPs, the hand-coded
//!   gated-function network, deep linear stacks), their forward passes and
//!   per-output parameter gradients.
//! - [`datagen`]: deterministic samplers for the sparse-feature tasks.
//! - [`apd`]: factorized parameter components, gradient attributions, batch
//!   top-k masking, the faithfulness/minimality/simplicity losses, and the
//!   decomposition training loop.
//! - [`eval`]: recovery metrics (MMCS, ML2R), neuron contributions,
//!   scrubbing experiments, forced top-1 analyses, and rank spectra.
//!
//! Everything here is `no_std + alloc`; all IO, file formats and the CLI live
//! in the companion `apd-lab` crate. All floating point math routes through
//! `libm` so that a given seed produces the same stream of numbers on every
//! platform.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(any(test, feature = "fault-injection"))]
extern crate std;

pub mod apd;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod models;
pub mod numerics;

pub use error::{CoreError, Result};
