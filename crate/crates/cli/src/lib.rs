//! Command-line harness: synthetic paired data, training, sampling,
//! evaluation, mask dumps and gradient checks.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod ppm;
pub mod synth;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use synth::SynthSpec;
