//! Turns raw multichannel EEG into model-ready epochs.
//!
//! The continuous recording is filtered first (band-pass, then notch) and
//! only then cut into stimulus-locked windows, which are standardized per
//! channel.

mod error;
pub mod filter;
pub mod io;
mod recording;
pub mod spectral;

pub use error::{EegError, Result};
pub use recording::{extract_epochs, zscore, EegEpoch, EpochSet, EpochWindow, Event, RawRecording, FILTER_ORDER};
pub use spectral::{attention_index, band_power, welch, Psd};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub bandpass_hz: (f64, f64),
    pub notch_hz: Option<(f64, f64)>,
    pub window: EpochWindow,
    pub standardize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            bandpass_hz: (1.0, 80.0),
            notch_hz: Some((48.0, 52.0)),
            window: EpochWindow::default(),
            standardize: true,
        }
    }
}

/// Band-pass, notch, epoch and (optionally) z-score a recording.
pub fn preprocess(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<EpochSet> {
    let mut filtered = rec.bandpass(cfg.bandpass_hz.0, cfg.bandpass_hz.1)?;
    if let Some((lo, hi)) = cfg.notch_hz {
        filtered = filtered.notch(lo, hi)?;
    }
    let mut set = extract_epochs(&filtered, cfg.window)?;
    if cfg.standardize {
        set.epochs = set.epochs.iter().map(zscore).collect::<Result<_>>()?;
    }
    Ok(set)
}
