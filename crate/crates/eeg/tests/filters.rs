use std::f64::consts::PI;

use neurimg_eeg::filter::{butterworth, BandKind};
use neurimg_eeg::{Event, RawRecording};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const FS: f64 = 1000.0;
const SECONDS: usize = 20;

fn tone(f: f64) -> Vec<f64> {
    (0..SECONDS * FS as usize)
        .map(|i| (2.0 * PI * f * i as f64 / FS).sin())
        .collect()
}

fn single(x: Vec<f64>) -> RawRecording {
    RawRecording::new(FS, vec![x], vec!["Oz".into()], vec![], "s").unwrap()
}

/// Least-squares amplitude of the `f` Hz component over the middle half,
/// away from the edge transients.
fn amplitude(y: &[f64], f: f64) -> f64 {
    let (a, b) = (y.len() / 4, 3 * y.len() / 4);
    let (mut s, mut c) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate().take(b).skip(a) {
        let ph = 2.0 * PI * f * i as f64 / FS;
        s += v * ph.sin();
        c += v * ph.cos();
    }
    let n = (b - a) as f64;
    2.0 * (s / n).hypot(c / n)
}

fn bandpassed(f: f64) -> Vec<f64> {
    single(tone(f)).bandpass(1.0, 80.0).unwrap().channels.remove(0)
}

fn notched(f: f64) -> Vec<f64> {
    single(tone(f)).notch(48.0, 52.0).unwrap().channels.remove(0)
}

#[test]
fn sections_match_reference_design() {
    // Reference second-order sections from an independent Butterworth
    // design (analog prototype + bilinear), frozen to 8 digits.
    let bp = [
        [0.0021388, 0.0042776, 0.0021388, 1.0, -1.22787588, 0.39352306],
        [1.0, 2.0, 1.0, 1.0, -1.48666367, 0.69496756],
        [1.0, -2.0, 1.0, 1.0, -1.98821547, 0.98825642],
        [1.0, -2.0, 1.0, 1.0, -1.99524675, 0.99528641],
    ];
    let bs = [
        [0.96769481, -1.84081025, 0.96769481, 1.0, -1.87712996, 0.97670993],
        [1.0, -1.90226323, 1.0, 1.0, -1.88364631, 0.97738256],
        [1.0, -1.90226323, 1.0, 1.0, -1.88544126, 0.99008854],
        [1.0, -1.90226323, 1.0, 1.0, -1.9003706, 0.99076944],
    ];
    for (kind, lo, hi, reference) in [(BandKind::Pass, 1.0, 80.0, bp), (BandKind::Stop, 48.0, 52.0, bs)] {
        let sos = butterworth(4, kind, lo, hi, FS).unwrap();
        // Section ordering may differ; compare denominators as a set and
        // the cascade's response pointwise.
        let mut got: Vec<[f64; 2]> = sos.sections.iter().map(|s| [s.a[1], s.a[2]]).collect();
        let mut want: Vec<[f64; 2]> = reference.iter().map(|r| [r[4], r[5]]).collect();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        want.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (g, w) in got.iter().zip(&want) {
            assert!((g[0] - w[0]).abs() < 1e-7 && (g[1] - w[1]).abs() < 1e-7, "{g:?} vs {w:?}");
        }
        let gain_ref: f64 = reference.iter().map(|r| r[0]).product();
        let gain: f64 = sos.sections.iter().map(|s| s.b[0]).product();
        assert!((gain - gain_ref).abs() < 1e-7 * gain_ref.abs().max(1.0));
    }
}

#[test]
fn bandpass_keeps_10hz_within_1db() {
    let a = amplitude(&bandpassed(10.0), 10.0);
    // The passband response is unity to ~1e-10; allow that rounding above 1.
    assert!((0.89..=1.0 + 1e-6).contains(&a), "{a}");
}

#[test]
fn bandpass_rejects_200hz() {
    let a = amplitude(&bandpassed(200.0), 200.0);
    assert!(a < 0.05, "{a}");
}

#[test]
fn bandpass_removes_dc_offset() {
    let y = single(vec![5.0; SECONDS * FS as usize]).bandpass(1.0, 80.0).unwrap();
    let y = &y.channels[0];
    let trim = 2 * FS as usize;
    let residual = y[trim..y.len() - trim].iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(residual < 0.01 * 5.0, "{residual}");
}

#[test]
fn notch_attenuates_mains_by_30db() {
    let a = amplitude(&notched(50.0), 50.0);
    let db = -20.0 * a.log10();
    assert!(db >= 30.0, "{db} dB");
}

#[test]
fn notch_passes_10hz() {
    let a = amplitude(&notched(10.0), 10.0);
    assert!((0.95..=1.0 + 1e-6).contains(&a), "{a}");
}

#[test]
fn notch_of_zero_is_zero() {
    let y = single(vec![0.0; 4000]).notch(48.0, 52.0).unwrap();
    assert!(y.channels[0].iter().all(|v| *v == 0.0));
}

#[test]
fn zero_phase_keeps_symmetric_pulse_symmetric() {
    let n = 20001;
    let mut x = vec![0.0; n];
    for (i, v) in x.iter_mut().enumerate() {
        let d = i as f64 - (n / 2) as f64;
        *v = (-(d * d) / (2.0 * 15.0 * 15.0)).exp();
    }
    for rec in [single(x.clone()).bandpass(1.0, 80.0).unwrap(), single(x).notch(48.0, 52.0).unwrap()] {
        let y = &rec.channels[0];
        let peak = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let asym = (0..n / 2).map(|i| (y[n / 2 - i] - y[n / 2 + i]).abs()).fold(0.0, f64::max);
        assert!(asym < 1e-6 * peak, "{asym} vs {peak}");
    }
}

fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn filtering_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = noise(seed, 3000);
        let y = noise(seed.wrapping_add(1), 3000);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        for kind in [BandKind::Pass, BandKind::Stop] {
            let (lo, hi) = if kind == BandKind::Pass { (1.0, 80.0) } else { (48.0, 52.0) };
            let sos = butterworth(4, kind, lo, hi, FS).unwrap();
            let fm = sos.filtfilt(&mix).unwrap();
            let fx = sos.filtfilt(&x).unwrap();
            let fy = sos.filtfilt(&y).unwrap();
            for i in 0..fm.len() {
                prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn filters_every_channel_independently() {
    let rec = RawRecording::new(
        FS,
        vec![tone(10.0), tone(200.0)],
        vec!["a".into(), "b".into()],
        vec![Event { sample: 10, label: "x".into() }],
        "s",
    )
    .unwrap();
    let out = rec.bandpass(1.0, 80.0).unwrap();
    assert_eq!(out.events, rec.events);
    assert!(amplitude(&out.channels[0], 10.0) > 0.89);
    assert!(amplitude(&out.channels[1], 200.0) < 0.05);
}
