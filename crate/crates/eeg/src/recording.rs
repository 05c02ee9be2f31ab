use neurimg_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{EegError, Result};
use crate::filter::{butterworth, BandKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub sample: usize,
    pub label: String,
}

/// Continuous multichannel recording, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub sample_rate_hz: f64,
    pub channels: Vec<Vec<f64>>,
    pub channel_labels: Vec<String>,
    pub events: Vec<Event>,
    pub subject: String,
}

impl RawRecording {
    pub fn new(
        sample_rate_hz: f64,
        channels: Vec<Vec<f64>>,
        channel_labels: Vec<String>,
        events: Vec<Event>,
        subject: impl Into<String>,
    ) -> Result<Self> {
        let rec = Self {
            sample_rate_hz,
            channels,
            channel_labels,
            events,
            subject: subject.into(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(EegError::Contract("sample rate must be positive".into()));
        }
        let t = self.len();
        if self.channels.iter().any(|c| c.len() != t) {
            return Err(EegError::Contract("channels differ in length".into()));
        }
        if self.channel_labels.len() != self.channels.len() {
            return Err(EegError::Contract(format!(
                "{} labels for {} channels",
                self.channel_labels.len(),
                self.channels.len()
            )));
        }
        if let Some(e) = self.events.iter().find(|e| e.sample >= t) {
            return Err(EegError::Contract(format!(
                "event at sample {} lies past the end ({t} samples)",
                e.sample
            )));
        }
        Ok(())
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    fn filtered(&self, kind: BandKind, low_hz: f64, high_hz: f64) -> Result<Self> {
        let sos = butterworth(FILTER_ORDER, kind, low_hz, high_hz, self.sample_rate_hz)?;
        let channels = self
            .channels
            .iter()
            .map(|c| sos.filtfilt(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            channels,
            ..self.clone()
        })
    }

    /// Zero-phase 4th-order Butterworth band-pass on every channel.
    pub fn bandpass(&self, low_hz: f64, high_hz: f64) -> Result<Self> {
        self.filtered(BandKind::Pass, low_hz, high_hz)
    }

    /// Zero-phase 4th-order Butterworth band-stop on every channel.
    pub fn notch(&self, low_hz: f64, high_hz: f64) -> Result<Self> {
        self.filtered(BandKind::Stop, low_hz, high_hz)
    }

    /// Appends `other` in time, shifting its events.
    pub fn concat(&self, other: &RawRecording) -> Result<Self> {
        if self.channel_count() != other.channel_count() || self.sample_rate_hz != other.sample_rate_hz {
            return Err(EegError::Contract("recordings are not compatible".into()));
        }
        let offset = self.len();
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| [a.as_slice(), b.as_slice()].concat())
            .collect();
        let events = self
            .events
            .iter()
            .cloned()
            .chain(other.events.iter().map(|e| Event {
                sample: e.sample + offset,
                label: e.label.clone(),
            }))
            .collect();
        Ok(Self {
            channels,
            events,
            ..self.clone()
        })
    }
}

pub const FILTER_ORDER: usize = 4;

/// Fixed-length window time-locked to a stimulus; `data` is channels × samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EegEpoch {
    pub data: Tensor,
    pub sample_rate_hz: f64,
    pub label: String,
    pub subject: String,
}

impl EegEpoch {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.data.row(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSet {
    pub epochs: Vec<EegEpoch>,
    /// Events whose window fell outside the recording.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochWindow {
    pub window_s: f64,
    /// Window start relative to the event onset.
    pub offset_s: f64,
    /// Constant trigger-to-stimulus latency added to every onset.
    pub latency_s: f64,
}

impl Default for EpochWindow {
    /// The central half second of a one-second presentation.
    fn default() -> Self {
        Self {
            window_s: 0.5,
            offset_s: 0.25,
            latency_s: 0.0,
        }
    }
}

/// Cuts one epoch per event; windows that run off either end are skipped.
pub fn extract_epochs(rec: &RawRecording, window: EpochWindow) -> Result<EpochSet> {
    rec.validate()?;
    let fs = rec.sample_rate_hz;
    let width = (window.window_s * fs).round() as usize;
    if width == 0 {
        return Err(EegError::Parameter("epoch window is shorter than one sample".into()));
    }
    let shift = ((window.offset_s + window.latency_s) * fs).round() as i64;
    let mut epochs = Vec::new();
    let mut skipped = 0;
    for ev in &rec.events {
        let start = ev.sample as i64 + shift;
        if start < 0 || start as usize + width > rec.len() {
            skipped += 1;
            continue;
        }
        let start = start as usize;
        let data: Vec<f64> = rec
            .channels
            .iter()
            .flat_map(|c| c[start..start + width].iter().copied())
            .collect();
        epochs.push(EegEpoch {
            data: Tensor::new(&[rec.channel_count(), width], data)?,
            sample_rate_hz: fs,
            label: ev.label.clone(),
            subject: rec.subject.clone(),
        });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} out-of-bounds epoch window(s)");
    }
    Ok(EpochSet { epochs, skipped })
}

/// Per-channel standardization with a standard-deviation floor of 1e-8.
pub fn zscore(epoch: &EegEpoch) -> Result<EegEpoch> {
    let w = epoch.samples();
    if w < 2 {
        return Err(EegError::Contract("zscore needs at least two samples".into()));
    }
    let mut data = epoch.data.clone();
    for row in data.data_mut().chunks_mut(w) {
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
        let std = var.sqrt().max(1e-8);
        for v in row.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
    Ok(EegEpoch {
        data,
        ..epoch.clone()
    })
}
