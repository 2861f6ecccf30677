//! Delay-Doppler OTFS channel synthesis and prediction.
//!
//! The crate is organised along the data path:
//!
//! * [`channel`] synthesises conditioned, temporally evolving delay-Doppler
//!   channel realizations (sum-of-sinusoids Jakes fading) and reads/writes
//!   DDCP dataset files.
//! * [`tensor`] is a small reverse-mode differentiation tape over dense
//!   row-major matrices, with Adam and the DDCK checkpoint format.
//! * [`model`] is the conditional VAE with a planar-flow latent space that
//!   predicts future channel frames.
//! * [`baseline`] holds the reference predictors (zero, stale CSI, AR(1)
//!   Wiener, simplified recurrent network).
//! * [`eval`] computes NMSE, runs Doppler and horizon sweeps, and emits CSV.
//! * [`cli`] wires configuration and the subcommands together.

pub mod baseline;
pub mod channel;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod special;
pub mod tensor;

pub use error::{Error, Result};
