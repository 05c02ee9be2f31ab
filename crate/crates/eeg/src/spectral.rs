//! Welch power spectral density and band power.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{EegError, Result};
use crate::recording::EegEpoch;

pub const MAX_SEGMENT: usize = 256;
pub const MIN_SAMPLES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Psd {
    /// Bin spacing in Hz.
    pub df: f64,
    /// One-sided density, bin `k` at `k * df` Hz.
    pub density: Vec<f64>,
}

impl Psd {
    pub fn freq(&self, k: usize) -> f64 {
        k as f64 * self.df
    }

    /// Rectangle-rule integral over bins whose centre lies in `[low, high]`.
    pub fn band_integral(&self, low_hz: f64, high_hz: f64) -> f64 {
        self.density
            .iter()
            .enumerate()
            .filter(|(k, _)| {
                let f = self.freq(*k);
                f >= low_hz && f <= high_hz
            })
            .map(|(_, p)| p * self.df)
            .sum()
    }
}

/// Welch estimate: periodic Hann window, segment length `min(len, 256)`,
/// 50% overlap, per-segment mean removal, density scaling.
pub fn welch(x: &[f64], fs: f64) -> Result<Psd> {
    if x.len() < MIN_SAMPLES {
        return Err(EegError::Contract(format!(
            "Welch needs at least {MIN_SAMPLES} samples, got {}",
            x.len()
        )));
    }
    let nperseg = x.len().min(MAX_SEGMENT);
    let step = nperseg - nperseg / 2;
    let window: Vec<f64> = (0..nperseg)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / nperseg as f64).cos())
        .collect();
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nperseg);
    let bins = nperseg / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut segments = 0;
    let mut buf = vec![Complex64::new(0.0, 0.0); nperseg];
    let mut start = 0;
    while start + nperseg <= x.len() {
        let seg = &x[start..start + nperseg];
        let mean = seg.iter().sum::<f64>() / nperseg as f64;
        for ((b, s), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new((s - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let scale = 1.0 / (fs * wss * segments as f64);
    let mut density: Vec<f64> = acc.iter().map(|a| a * scale).collect();
    // fold negative frequencies; DC and (even-length) Nyquist are unpaired
    let last = if nperseg % 2 == 0 { bins - 1 } else { bins };
    for d in density.iter_mut().take(last).skip(1) {
        *d *= 2.0;
    }
    Ok(Psd {
        df: fs / nperseg as f64,
        density,
    })
}

/// Mean over channels of the Welch band integral over `[low_hz, high_hz]`.
pub fn band_power(epoch: &EegEpoch, low_hz: f64, high_hz: f64) -> Result<f64> {
    let fs = epoch.sample_rate_hz;
    if !(0.0 <= low_hz && low_hz < high_hz && high_hz <= fs / 2.0) {
        return Err(EegError::Parameter(format!(
            "band {low_hz}-{high_hz} Hz outside 0..{} Hz",
            fs / 2.0
        )));
    }
    let mut total = 0.0;
    for c in 0..epoch.channels() {
        total += welch(epoch.channel(c), fs)?.band_integral(low_hz, high_hz);
    }
    Ok(total / epoch.channels() as f64)
}

pub const ALPHA_BAND: (f64, f64) = (8.0, 12.0);
pub const THETA_BAND: (f64, f64) = (4.0, 8.0);

/// Alpha (8-12 Hz) over theta (4-8 Hz) band power.
pub fn attention_index(epoch: &EegEpoch) -> Result<f64> {
    let alpha = band_power(epoch, ALPHA_BAND.0, ALPHA_BAND.1)?;
    let theta = band_power(epoch, THETA_BAND.0, THETA_BAND.1)?;
    Ok(alpha / (theta + 1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use neurimg_tensor::Tensor;

    #[test]
    fn parseval_for_white_segment() {
        // Total one-sided density integrates to the (mean-removed) variance
        // up to the window's bias on a pure tone at a bin centre.
        let fs = 256.0;
        let x: Vec<f64> = (0..256).map(|i| (2.0 * PI * 16.0 * i as f64 / fs).sin()).collect();
        let p = welch(&x, fs).unwrap();
        let total: f64 = p.density.iter().sum::<f64>() * p.df;
        assert!((total - 0.5).abs() < 1e-9, "{total}");
    }

    #[test]
    fn short_epoch_is_rejected() {
        let e = EegEpoch {
            data: Tensor::zeros(&[1, 7]),
            sample_rate_hz: 100.0,
            label: String::new(),
            subject: String::new(),
        };
        assert!(matches!(band_power(&e, 4.0, 8.0), Err(EegError::Contract(_))));
    }
}
