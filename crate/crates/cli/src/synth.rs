//! Synthetic paired image/EEG dataset. Each class has a stripe style and an
//! oscillation frequency; the EEG of a pair carries its class in that
//! frequency.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use neurimg_core::Example;
use neurimg_eeg::io::{write_epochs, EpochIndex, INDEX_FILE};
use neurimg_eeg::{band_power, zscore, EegEpoch};
use neurimg_tensor::{read_unt1, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliError, Result};
use crate::ppm::{read_ppm, write_ppm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStyle {
    /// Background and stripe colours, RGB in `[0, 1]`.
    pub palette: [[f64; 3]; 2],
    /// Stripe cycles across the image.
    pub stripe_freq: f64,
    pub angle_deg: f64,
    /// Standard deviation of per-pixel texture noise.
    pub noise_amp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub image_size: usize,
    pub styles: Vec<ClassStyle>,
    pub eeg_channels: usize,
    pub sample_rate_hz: f64,
    pub eeg_samples: usize,
    /// Oscillation frequency of each class.
    pub freqs_hz: Vec<f64>,
    /// Signal-to-noise power ratio per channel; `None` is noise-free.
    pub snr: Option<f64>,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

fn style(bg: [f64; 3], fg: [f64; 3], stripe_freq: f64, angle_deg: f64) -> ClassStyle {
    ClassStyle {
        palette: [bg, fg],
        stripe_freq,
        angle_deg,
        noise_amp: 0.015,
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            image_size: 16,
            styles: vec![
                style([0.9, 0.2, 0.2], [0.2, 0.1, 0.5], 2.0, 0.0),
                style([0.1, 0.7, 0.3], [0.9, 0.9, 0.6], 3.0, 90.0),
                style([0.2, 0.4, 0.9], [0.95, 0.6, 0.1], 2.5, 45.0),
                style([0.6, 0.6, 0.6], [0.1, 0.1, 0.1], 1.5, 135.0),
            ],
            eeg_channels: 8,
            sample_rate_hz: 256.0,
            eeg_samples: 128,
            freqs_hz: vec![6.0, 12.0, 20.0, 30.0],
            snr: Some(0.5),
            train_per_class: 200,
            test_per_class: 50,
        }
    }
}

pub const FREQ_RANGE_HZ: (f64, f64) = (4.0, 40.0);
/// Half-width of the band around each class frequency used for features.
pub const BAND_HALF_WIDTH_HZ: f64 = 2.0;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.image_size == 0 || self.eeg_channels == 0 || self.eeg_samples < 8 {
            return Err(usage("classes, image_size and eeg_channels must be positive, eeg_samples at least 8"));
        }
        if self.styles.len() != self.classes || self.freqs_hz.len() != self.classes {
            return Err(usage(format!(
                "{} classes need as many styles and frequencies, got {} and {}",
                self.classes,
                self.styles.len(),
                self.freqs_hz.len()
            )));
        }
        for (i, &f) in self.freqs_hz.iter().enumerate() {
            if !(FREQ_RANGE_HZ.0..=FREQ_RANGE_HZ.1).contains(&f) || f + BAND_HALF_WIDTH_HZ >= self.sample_rate_hz / 2.0 {
                return Err(usage(format!("class frequency {f} Hz must lie in 4-40 Hz and below Nyquist")));
            }
            if self.freqs_hz[..i].iter().any(|&g| (g - f).abs() < 2.0 * BAND_HALF_WIDTH_HZ) {
                return Err(usage(format!("class frequency {f} Hz is not distinct from the others")));
            }
        }
        if matches!(self.snr, Some(s) if !(s > 0.0 && s.is_finite())) {
            return Err(usage("snr must be positive"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(usage("train_per_class and test_per_class must be positive"));
        }
        Ok(())
    }
}

pub fn prompt(class: usize) -> String {
    format!("style {class}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub label: usize,
    pub prompt: String,
    /// Image path relative to the split directory.
    pub image: String,
    /// Epoch path relative to the split directory.
    pub epoch: String,
}

pub const SPLITS: [&str; 2] = ["train", "test"];
pub const MANIFEST_FILE: &str = "manifest.json";

/// A stripe image quantized to 8 bits, so it survives a PPM round trip.
pub fn render_image<R: Rng + ?Sized>(style: &ClassStyle, size: usize, rng: &mut R) -> Tensor {
    let phase = rng.random_range(0.0..2.0 * PI);
    let (sin, cos) = style.angle_deg.to_radians().sin_cos();
    let [a, b] = style.palette;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 * cos + y as f64 * sin) / size as f64;
            let s = 0.5 + 0.5 * (2.0 * PI * style.stripe_freq * u + phase).sin();
            for c in 0..3 {
                let n: f64 = StandardNormal.sample(rng);
                let v = (a[c] * (1.0 - s) + b[c] * s + style.noise_amp * n).clamp(0.0, 1.0);
                data.push((v * 255.0).round() / 255.0);
            }
        }
    }
    Tensor::new(&[size, size, 3], data).expect("square image")
}

/// A standardized `C × W` epoch: a random-phase sinusoid at the class
/// frequency on every channel plus white noise at the dataset SNR.
pub fn synth_epoch<R: Rng + ?Sized>(spec: &SynthSpec, class: usize, rng: &mut R) -> Result<EegEpoch> {
    let f = spec.freqs_hz[class];
    let noise_std = spec.snr.map_or(0.0, |s| (0.5 / s).sqrt());
    let mut data = Vec::with_capacity(spec.eeg_channels * spec.eeg_samples);
    for _ in 0..spec.eeg_channels {
        let phase = rng.random_range(0.0..2.0 * PI);
        for t in 0..spec.eeg_samples {
            let n: f64 = StandardNormal.sample(rng);
            data.push((2.0 * PI * f * t as f64 / spec.sample_rate_hz + phase).sin() + noise_std * n);
        }
    }
    let epoch = EegEpoch {
        data: Tensor::new(&[spec.eeg_channels, spec.eeg_samples], data)?,
        sample_rate_hz: spec.sample_rate_hz,
        label: prompt(class),
        subject: "synthetic".into(),
    };
    Ok(zscore(&epoch)?)
}

#[derive(Serialize, Deserialize)]
struct SynthRecord {
    seed: u64,
    spec: SynthSpec,
}

fn item_rng(seed: u64, split: usize, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 32) | i as u64);
    rng
}

/// Writes both splits under `dir`. Items are interleaved by class and every
/// item draws from its own stream, so the output depends only on
/// `(spec, seed)`.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<()> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let record = SynthRecord {
        seed,
        spec: spec.clone(),
    };
    std::fs::write(dir.join("spec.json"), serde_json::to_vec_pretty(&record)?)?;
    for (s, split) in SPLITS.iter().enumerate() {
        let per_class = if s == 0 { spec.train_per_class } else { spec.test_per_class };
        let n = per_class * spec.classes;
        let items: Vec<(Tensor, EegEpoch)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = item_rng(seed, s, i);
                let class = i % spec.classes;
                let img = render_image(&spec.styles[class], spec.image_size, &mut rng);
                Ok((img, synth_epoch(spec, class, &mut rng)?))
            })
            .collect::<Result<_>>()?;
        let root = dir.join(split);
        std::fs::create_dir_all(root.join("images"))?;
        let mut rows = Vec::with_capacity(n);
        for (i, (img, _)) in items.iter().enumerate() {
            let id = format!("{split}-{i:05}");
            let image = format!("images/{id}.ppm");
            write_ppm(&root.join(&image), img)?;
            rows.push(ManifestRow {
                id,
                label: i % spec.classes,
                prompt: prompt(i % spec.classes),
                image,
                epoch: format!("eeg/epoch_{i:05}.unt"),
            });
        }
        let epochs: Vec<EegEpoch> = items.into_iter().map(|(_, e)| e).collect();
        write_epochs(&epochs, &root.join("eeg"))?;
        std::fs::write(root.join(MANIFEST_FILE), serde_json::to_vec_pretty(&rows)?)?;
    }
    Ok(())
}

/// The settings and seed a dataset was generated with.
pub fn read_spec(dir: &Path) -> Result<(SynthSpec, u64)> {
    let path = dir.join("spec.json");
    let bytes = std::fs::read(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let r: SynthRecord = serde_json::from_slice(&bytes)?;
    Ok((r.spec, r.seed))
}

/// One split of a paired dataset.
#[derive(Clone, Debug)]
pub struct Split {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub examples: Vec<Example>,
    pub sample_rate_hz: f64,
}

impl Split {
    pub fn epoch(&self, i: usize) -> EegEpoch {
        EegEpoch {
            data: self.examples[i].epoch.clone(),
            sample_rate_hz: self.sample_rate_hz,
            label: self.rows[i].prompt.clone(),
            subject: String::new(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.examples.iter().map(|e| e.image.clone()).collect()
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_split(dir: &Path, split: &str) -> Result<Split> {
    let root = dir.join(split);
    let rows = read_manifest(&root.join(MANIFEST_FILE))?;
    let index_path = root.join("eeg").join(INDEX_FILE);
    let index: EpochIndex = serde_json::from_slice(
        &std::fs::read(&index_path).map_err(|e| CliError::Io(format!("{}: {e}", index_path.display())))?,
    )?;
    let examples = rows
        .par_iter()
        .map(|r| {
            Ok(Example {
                image: read_ppm(&root.join(&r.image))?,
                prompt: r.prompt.clone(),
                epoch: read_unt1(root.join(&r.epoch))?,
                label: r.label,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Split {
        root,
        rows,
        examples,
        sample_rate_hz: index.sample_rate_hz,
    })
}

/// Log band power around each class frequency.
pub fn eeg_features(epoch: &EegEpoch, freqs_hz: &[f64]) -> Result<Vec<f64>> {
    freqs_hz
        .iter()
        .map(|&f| Ok((band_power(epoch, f - BAND_HALF_WIDTH_HZ, f + BAND_HALF_WIDTH_HZ)? + 1e-12).ln()))
        .collect()
}

/// Nearest-centroid classifier on [`eeg_features`], fitted on `train` and
/// scored on `test`: the ceiling for decoding class from the EEG alone.
pub fn direct_eeg_probe(train: &Split, test: &Split, freqs_hz: &[f64]) -> Result<f64> {
    let k = freqs_hz.len();
    let feats = |s: &Split| -> Result<Vec<Vec<f64>>> {
        (0..s.rows.len()).map(|i| eeg_features(&s.epoch(i), freqs_hz)).collect()
    };
    let (ftr, fte) = (feats(train)?, feats(test)?);
    let mut centroids = vec![vec![0.0; k]; k];
    let mut counts = vec![0usize; k];
    for (f, r) in ftr.iter().zip(&train.rows) {
        if r.label >= k {
            return Err(usage(format!("label {} outside {k} classes", r.label)));
        }
        counts[r.label] += 1;
        for (c, v) in centroids[r.label].iter_mut().zip(f) {
            *c += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = fte
        .iter()
        .zip(&test.rows)
        .filter(|(f, r)| {
            let dist = |c: &Vec<f64>| c.iter().zip(f.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..k).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap_or(0);
            best == r.label
        })
        .count();
    Ok(correct as f64 / test.rows.len().max(1) as f64)
}
