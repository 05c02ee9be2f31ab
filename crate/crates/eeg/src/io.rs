//! Recording manifests and epoch directories.
//!
//! A recording is a JSON manifest plus a raw little-endian `f32`
//! channel-major sample file. An epoch directory holds one UNT1 tensor per
//! epoch and an `index.json` listing `{file, label, subject}`.

use std::fs;
use std::path::{Path, PathBuf};

use neurimg_tensor::{read_unt1, write_unt1};
use serde::{Deserialize, Serialize};

use crate::error::{EegError, Result};
use crate::recording::{EegEpoch, Event, RawRecording};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingManifest {
    pub sample_rate_hz: f64,
    pub channel_labels: Vec<String>,
    pub events: Vec<Event>,
    pub data_file: String,
    #[serde(default)]
    pub subject: Option<String>,
}

pub fn read_recording(manifest_path: &Path) -> Result<RawRecording> {
    let manifest: RecordingManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let data_path = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.data_file);
    let bytes = fs::read(&data_path)?;
    let c = manifest.channel_labels.len();
    if c == 0 || bytes.len() % (4 * c) != 0 {
        return Err(EegError::Contract(format!(
            "{} bytes cannot hold {c} channels of f32 samples",
            bytes.len()
        )));
    }
    let t = bytes.len() / (4 * c);
    let samples: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let channels = samples.chunks(t).map(<[f64]>::to_vec).collect();
    RawRecording::new(
        manifest.sample_rate_hz,
        channels,
        manifest.channel_labels,
        manifest.events,
        manifest.subject.unwrap_or_else(|| "0".into()),
    )
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.f32`.
pub fn write_recording(rec: &RawRecording, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let data_file = format!("{stem}.f32");
    let mut bytes = Vec::with_capacity(4 * rec.len() * rec.channel_count());
    for c in &rec.channels {
        for &v in c {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(dir.join(&data_file), bytes)?;
    let manifest = RecordingManifest {
        sample_rate_hz: rec.sample_rate_hz,
        channel_labels: rec.channel_labels.clone(),
        events: rec.events.clone(),
        data_file,
        subject: Some(rec.subject.clone()),
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub file: String,
    pub label: String,
    pub subject: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochIndex {
    pub sample_rate_hz: f64,
    pub epochs: Vec<EpochEntry>,
}

pub const INDEX_FILE: &str = "index.json";

pub fn write_epochs(epochs: &[EegEpoch], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(epochs.len());
    for (i, e) in epochs.iter().enumerate() {
        let file = format!("epoch_{i:05}.unt");
        write_unt1(dir.join(&file), &e.data)?;
        entries.push(EpochEntry {
            file,
            label: e.label.clone(),
            subject: e.subject.clone(),
        });
    }
    let index = EpochIndex {
        sample_rate_hz: epochs.first().map_or(0.0, |e| e.sample_rate_hz),
        epochs: entries,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn read_epochs(dir: &Path) -> Result<Vec<EegEpoch>> {
    let index: EpochIndex = serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?;
    index
        .epochs
        .iter()
        .map(|e| {
            let data = read_unt1(dir.join(&e.file))?;
            if data.rank() != 2 {
                return Err(EegError::Contract(format!("{} is not channels x samples", e.file)));
            }
            Ok(EegEpoch {
                data,
                sample_rate_hz: index.sample_rate_hz,
                label: e.label.clone(),
                subject: e.subject.clone(),
            })
        })
        .collect()
}
