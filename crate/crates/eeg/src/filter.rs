//! Butterworth band-pass / band-stop design as cascaded second-order
//! sections, and zero-phase forward-backward filtering.
//!
//! Design goes analog prototype -> band transform -> bilinear transform, the
//! same route as the usual `butter(N, [lo, hi], btype, fs=fs)` recipe, so an
//! order-`N` band filter has `2N` poles.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{EegError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandKind {
    Pass,
    Stop,
}

/// One biquad: `b0 + b1 z^-1 + b2 z^-2` over `1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

fn check_band(low_hz: f64, high_hz: f64, fs: f64) -> Result<()> {
    if !(fs > 0.0 && low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(EegError::Parameter(format!(
            "band {low_hz}-{high_hz} Hz must satisfy 0 < low < high < {} (Nyquist)",
            fs / 2.0
        )));
    }
    Ok(())
}

/// Designs an order-`order` Butterworth band filter for sample rate `fs`.
pub fn butterworth(order: usize, kind: BandKind, low_hz: f64, high_hz: f64, fs: f64) -> Result<SosFilter> {
    check_band(low_hz, high_hz, fs)?;
    if order == 0 {
        return Err(EegError::Parameter("filter order must be positive".into()));
    }
    // Analog prototype poles on the left half of the unit circle.
    let n = order as f64;
    let proto: Vec<Complex64> = (0..order)
        .map(|i| {
            let m = -(n - 1.0) + 2.0 * i as f64;
            -Complex64::from_polar(1.0, PI * m / (2.0 * n))
        })
        .collect();

    // Pre-warp the edges for a bilinear transform at fs = 2.
    let warp = |f: f64| 4.0 * (PI * (f / (fs / 2.0)) / 2.0).tan();
    let (w1, w2) = (warp(low_hz), warp(high_hz));
    let bw = w2 - w1;
    let wo = (w1 * w2).sqrt();
    let wo2 = Complex64::new(wo * wo, 0.0);

    let mut poles = Vec::with_capacity(2 * order);
    let mut zeros = Vec::with_capacity(2 * order);
    let mut gain;
    match kind {
        BandKind::Pass => {
            for &p in &proto {
                let pl = p * (bw / 2.0);
                let r = (pl * pl - wo2).sqrt();
                poles.push(pl + r);
                poles.push(pl - r);
            }
            zeros.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), order));
            gain = bw.powi(order as i32);
        }
        BandKind::Stop => {
            for &p in &proto {
                let ph = (bw / 2.0) / p;
                let r = (ph * ph - wo2).sqrt();
                poles.push(ph + r);
                poles.push(ph - r);
            }
            zeros.extend(std::iter::repeat_n(Complex64::new(0.0, wo), order));
            zeros.extend(std::iter::repeat_n(Complex64::new(0.0, -wo), order));
            let prod = proto.iter().fold(Complex64::new(1.0, 0.0), |acc, p| acc * -p);
            gain = (Complex64::new(1.0, 0.0) / prod).re;
        }
    }

    // Bilinear transform, fs = 2.
    let fs2 = Complex64::new(4.0, 0.0);
    let num = zeros.iter().fold(Complex64::new(1.0, 0.0), |acc, z| acc * (fs2 - z));
    let den = poles.iter().fold(Complex64::new(1.0, 0.0), |acc, p| acc * (fs2 - p));
    gain *= (num / den).re;
    let mut zd: Vec<Complex64> = zeros.iter().map(|z| (fs2 + z) / (fs2 - z)).collect();
    let pd: Vec<Complex64> = poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    zd.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), pd.len() - zd.len()));

    let pole_pairs = conjugate_pairs(&pd);
    let zero_pairs = conjugate_pairs(&zd);
    debug_assert_eq!(pole_pairs.len(), zero_pairs.len());
    let sections = pole_pairs
        .iter()
        .zip(&zero_pairs)
        .enumerate()
        .map(|(i, (&(p1, p2), &(z1, z2)))| {
            let g = if i == 0 { gain } else { 1.0 };
            Biquad {
                b: [g, -g * (z1 + z2).re, g * (z1 * z2).re],
                a: [1.0, -(p1 + p2).re, (p1 * p2).re],
            }
        })
        .collect();
    Ok(SosFilter { sections })
}

/// Groups roots into conjugate pairs; leftover real roots pair with each other.
fn conjugate_pairs(roots: &[Complex64]) -> Vec<(Complex64, Complex64)> {
    const TOL: f64 = 1e-10;
    let mut complex: Vec<Complex64> = roots.iter().copied().filter(|r| r.im > TOL).collect();
    complex.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
    let mut reals: Vec<f64> = roots.iter().filter(|r| r.im.abs() <= TOL).map(|r| r.re).collect();
    reals.sort_by(f64::total_cmp);
    let mut pairs: Vec<_> = complex.into_iter().map(|c| (c, c.conj())).collect();
    // Pair extreme reals (e.g. +1 with -1) so each section gets a balanced numerator.
    while reals.len() >= 2 {
        let hi = reals.pop().unwrap();
        let lo = reals.remove(0);
        pairs.push((Complex64::new(hi, 0.0), Complex64::new(lo, 0.0)));
    }
    if let Some(r) = reals.pop() {
        pairs.push((Complex64::new(r, 0.0), Complex64::new(0.0, 0.0)));
    }
    pairs
}

impl Biquad {
    /// Steady-state state for a unit step input (direct form II transposed).
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        // (I - A) zi = B with A the transposed companion matrix of `a`.
        let (m00, m01, m10, m11) = (1.0 + a1, -1.0, a2, 1.0);
        let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
        let det = m00 * m11 - m01 * m10;
        [(r0 * m11 - m01 * r1) / det, (m00 * r1 - m10 * r0) / det]
    }
}

impl SosFilter {
    /// Per-section states that make a constant input start in steady state.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let zi = s.step_state();
                let out = [zi[0] * scale, zi[1] * scale];
                scale *= s.b.iter().sum::<f64>() / s.a.iter().sum::<f64>();
                out
            })
            .collect()
    }

    /// Causal filtering from the given initial states.
    fn run(&self, x: &mut [f64], mut state: Vec<[f64; 2]>) {
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            for v in x.iter_mut() {
                let xi = *v;
                let y = b0 * xi + z[0];
                z[0] = b1 * xi - a1 * y + z[1];
                z[1] = b2 * xi - a2 * y;
                *v = y;
            }
        }
    }

    /// Number of samples of odd extension added at each end.
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    /// Zero-phase filtering: odd-extend, filter forward, filter backward,
    /// trim. The squared magnitude response is applied with no phase shift.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let edge = self.pad_len();
        if x.len() <= edge {
            return Err(EegError::Contract(format!(
                "signal of {} samples is too short for zero-phase filtering (needs > {edge})",
                x.len()
            )));
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * edge);
        ext.extend((1..=edge).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=edge).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.step_states();
        let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();
        let first = ext[0];
        self.run(&mut ext, scaled(first));
        ext.reverse();
        let first = ext[0];
        self.run(&mut ext, scaled(first));
        ext.reverse();
        Ok(ext[edge..edge + n].to_vec())
    }

    /// Complex frequency response at `f_hz` for sample rate `fs`.
    pub fn response(&self, f_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * f_hz / fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |acc, s| {
            let num = s.b[0] + z1 * s.b[1] + z2 * s.b[2];
            let den = s.a[0] + z1 * s.a[1] + z2 * s.a[2];
            acc * num / den
        })
    }
}
