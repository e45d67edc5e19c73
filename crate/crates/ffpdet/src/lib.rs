//! Datasets, checkpoints, training, evaluation and benchmarking on top of
//! `ffpdet-core`.

pub mod acceptance;
pub mod analyze;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod synth;
pub mod train;
pub mod viz;

pub use error::{CliError, Result};
