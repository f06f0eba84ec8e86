//! Few-step waveform generation by adversarial flow matching optimization.
//!
//! A period-aware vector-field estimator is first trained with conditional
//! flow matching, then turned into a fixed-step Euler generator and
//! fine-tuned with a multi-scale Mel reconstruction loss plus LSGAN and
//! feature-matching feedback from multi-period and CQT discriminators.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod losses;
pub mod model;
pub mod signal;
mod spectral;
pub mod train;

pub use error::{Error, Result};
