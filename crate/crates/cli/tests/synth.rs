mod common;

use common::{tiny_spec, tree};
use neurimg_cli::synth::{direct_eeg_probe, eeg_features, gen_synthetic, load_split, read_manifest, read_spec, render_image};
use neurimg_cli::SynthSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn default_dataset_has_all_rows() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::default();
    gen_synthetic(&spec, 0, dir.path()).unwrap();
    let train = read_manifest(&dir.path().join("train/manifest.json")).unwrap();
    let test = read_manifest(&dir.path().join("test/manifest.json")).unwrap();
    assert_eq!(train.len() + test.len(), 1000);
    assert_eq!((train.len(), test.len()), (800, 200));
    for (split, rows) in [("train", &train), ("test", &test)] {
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.label, i % 4);
            assert_eq!(r.prompt, format!("style {}", r.label));
            assert!(dir.path().join(split).join(&r.image).is_file());
            assert!(dir.path().join(split).join(&r.epoch).is_file());
        }
    }
    assert_eq!(read_spec(dir.path()).unwrap(), (spec, 0));
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic(&tiny_spec(), 5, a.path()).unwrap();
    gen_synthetic(&tiny_spec(), 5, b.path()).unwrap();
    gen_synthetic(&tiny_spec(), 6, c.path()).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert_eq!(ta, tb);
    assert_eq!(ta.keys().collect::<Vec<_>>(), tc.keys().collect::<Vec<_>>());
    assert_ne!(ta, tc);
}

#[test]
fn noise_free_eeg_is_dominated_by_its_class_band() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { snr: None, ..tiny_spec() };
    gen_synthetic(&spec, 1, dir.path()).unwrap();
    let split = load_split(dir.path(), "train").unwrap();
    for i in 0..split.rows.len() {
        let f = eeg_features(&split.epoch(i), &spec.freqs_hz).unwrap();
        let own = f[split.rows[i].label];
        for (k, &other) in f.iter().enumerate() {
            if k != split.rows[i].label {
                assert!(own - other >= 20f64.ln(), "row {i}: band {k} is within 20x");
            }
        }
    }
    let test = load_split(dir.path(), "test").unwrap();
    assert_eq!(direct_eeg_probe(&split, &test, &spec.freqs_hz).unwrap(), 1.0);
}

#[test]
fn default_snr_supports_a_strong_direct_probe() {
    let dir = tempfile::tempdir().unwrap();
    gen_synthetic(&SynthSpec::default(), 0, dir.path()).unwrap();
    let (train, test) = (load_split(dir.path(), "train").unwrap(), load_split(dir.path(), "test").unwrap());
    let acc = direct_eeg_probe(&train, &test, &SynthSpec::default().freqs_hz).unwrap();
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn epochs_are_standardized() {
    let dir = tempfile::tempdir().unwrap();
    gen_synthetic(&tiny_spec(), 2, dir.path()).unwrap();
    let split = load_split(dir.path(), "test").unwrap();
    for ex in &split.examples {
        let w = ex.epoch.shape()[1];
        for row in ex.epoch.data().chunks(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn images_are_eight_bit_and_in_range() {
    let spec = SynthSpec::default();
    let img = render_image(&spec.styles[2], 16, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(img.shape(), &[16, 16, 3]);
    assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v) && (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SynthSpec { classes: 3, ..SynthSpec::default() },
        SynthSpec { freqs_hz: vec![6.0, 7.0, 20.0, 30.0], ..SynthSpec::default() },
        SynthSpec { freqs_hz: vec![2.0, 12.0, 20.0, 30.0], ..SynthSpec::default() },
        SynthSpec { snr: Some(0.0), ..SynthSpec::default() },
        SynthSpec { test_per_class: 0, ..SynthSpec::default() },
    ];
    for s in bad {
        assert!(s.validate().is_err(), "{s:?}");
    }
}
