//! Variable-rate discrete representation learning at desk scale.
//!
//! The pipeline: a [`slowae`] encoder maps a signal to slowly varying
//! continuous codes, [`quantiser::stq`] turns them into integer levels, the
//! [`codec`] run-length encodes and interleaves every channel into an
//! [`EventSequence`], and an [`rlt`] transformer models those sequences.
//! [`slowness`] penalties and the [`controller`] keep the event rate on target.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line tools and tests.

pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod controller;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod quantiser;
pub mod rlt;
pub mod scalar;
pub mod slowae;
pub mod slowness;
pub mod synth;

pub use codec::{DenseCodes, EventSequence, Run};
pub use error::{Error, Result};
pub use grid::Grid;
pub use scalar::Scalar;

/// Double-precision tape, used for gradient checks.
pub type Tape64 = autodiff::Tape<f64>;
/// Single-precision tape.
pub type Tape32 = autodiff::Tape<f32>;
/// Continuous encoder output in double precision.
pub type ContinuousCodes = Grid<f64>;
/// Slow autoencoder in single precision.
pub type SlowAe32 = slowae::SlowAe<f32>;
/// Slow autoencoder in double precision.
pub type SlowAe64 = slowae::SlowAe<f64>;
pub type Rlt32 = rlt::Rlt<f32>;
pub type Rlt64 = rlt::Rlt<f64>;
