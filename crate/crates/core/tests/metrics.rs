use neurimg_core::metrics::{grayscale, PROBE_MIN_ACCURACY};
use neurimg_core::{l1, l2, probe_metrics, psnr, ssim, CoreError, Probe, ProbeConfig};
use neurimg_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn img(h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[h, w, 3], 0.0, 1.0, &mut rng(seed))
}

/// Windowed SSIM recomputed from scratch for every window.
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let (c1, c2) = ((0.01 * peak) * (0.01 * peak), (0.03 * peak) * (0.03 * peak));
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - 8 {
        for x in 0..=w - 8 {
            let idx: Vec<usize> = (0..8).flat_map(|dy| (0..8).map(move |dx| (y + dy) * w + x + dx)).collect();
            let mean = |v: &[f64]| idx.iter().map(|&i| v[i]).sum::<f64>() / 64.0;
            let (ma, mb) = (mean(a), mean(b));
            let va = idx.iter().map(|&i| (a[i] - ma).powi(2)).sum::<f64>() / 64.0;
            let vb = idx.iter().map(|&i| (b[i] - mb).powi(2)).sum::<f64>() / 64.0;
            let cov = idx.iter().map(|&i| (a[i] - ma) * (b[i] - mb)).sum::<f64>() / 64.0;
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn gray(t: &Tensor) -> Vec<f64> {
    t.data().chunks(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
}

#[test]
fn pixel_metric_examples() {
    let a = img(4, 4, 1);
    assert_eq!(l1(&a, &a).unwrap(), 0.0);
    assert_eq!(l2(&a, &a).unwrap(), 0.0);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    let zeros = Tensor::zeros(&[4, 4, 3]);
    let ones = Tensor::ones(&[4, 4, 3]);
    assert_eq!(l1(&zeros, &ones).unwrap(), 1.0);
    assert_eq!(l2(&zeros, &ones).unwrap(), 1.0);
    let tenth = Tensor::full(&[4, 4, 3], 0.1);
    assert!((psnr(&zeros, &tenth, 1.0).unwrap() - 20.0).abs() < 1e-12);
    assert!(matches!(l1(&zeros, &Tensor::zeros(&[4, 4, 1])), Err(CoreError::Dimension(_))));
}

#[test]
fn pixel_metrics_match_recomputation() {
    for seed in 0..10 {
        let (a, b) = (img(8, 6, seed), img(8, 6, seed + 100));
        let n = a.len() as f64;
        let d: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let want_l1 = d.iter().map(|v| v.abs()).sum::<f64>() / n;
        let want_l2 = d.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((l1(&a, &b).unwrap() - want_l1).abs() < 1e-12);
        assert!((l2(&a, &b).unwrap() - want_l2).abs() < 1e-12);
        let want_psnr = -10.0 * want_l2.log10() + 20.0 * 2f64.log10();
        assert!((psnr(&a, &b, 2.0).unwrap() - want_psnr).abs() < 1e-9);
    }
}

#[test]
fn grayscale_weights() {
    let t = Tensor::new(&[1, 2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.5, 1.0]).unwrap();
    let (h, w, g) = grayscale(&t).unwrap();
    assert_eq!((h, w), (1, 2));
    assert!((g[0] - 0.299).abs() < 1e-15 && (g[1] - (0.2935 + 0.114)).abs() < 1e-15);
    assert!(grayscale(&Tensor::zeros(&[2, 2, 2])).is_err());
}

#[test]
fn ssim_identity_and_anticorrelation() {
    let a = img(12, 12, 2);
    assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    let g = Tensor::randn(&[8, 8, 1], 1.0, &mut rng(3));
    let mean = g.mean();
    let centered = g.map(|v| v - mean);
    let neg = centered.map(|v| -v);
    assert!(ssim(&centered, &neg, 1.0).unwrap() < 0.0);
    assert!(matches!(ssim(&img(7, 12, 4), &img(7, 12, 5), 1.0), Err(CoreError::Dimension(_))));
}

#[test]
fn ssim_matches_windowed_oracle() {
    for (h, w, seed) in [(8, 8, 6), (16, 16, 7), (11, 9, 8)] {
        let a = img(h, w, seed);
        let b = a.zip_map(&img(h, w, seed + 50), |x, y| 0.7 * x + 0.3 * y).unwrap();
        let want = ssim_oracle(&gray(&a), &gray(&b), h, w, 1.0);
        assert!((ssim(&a, &b, 1.0).unwrap() - want).abs() < 1e-9);
        let want255 = ssim_oracle(&gray(&a.scale(255.0)), &gray(&b.scale(255.0)), h, w, 255.0);
        assert!((ssim(&a.scale(255.0), &b.scale(255.0), 255.0).unwrap() - want255).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn symmetric_metrics(seed in any::<u64>()) {
        let (a, b) = (img(9, 8, seed), img(9, 8, seed ^ 0x5555));
        prop_assert_eq!(l1(&a, &b).unwrap(), l1(&b, &a).unwrap());
        prop_assert_eq!(l2(&a, &b).unwrap(), l2(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
        let s = ssim(&a, &b, 1.0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn psnr_falls_as_l2_grows(seed in any::<u64>(), k in 0.01f64..0.5) {
        let a = img(4, 4, seed);
        let noise = Tensor::randn(&[4, 4, 3], 1.0, &mut rng(seed ^ 1));
        let near = a.add(&noise.scale(k)).unwrap();
        let far = a.add(&noise.scale(k * 1.5)).unwrap();
        prop_assert!(l2(&a, &near).unwrap() < l2(&a, &far).unwrap());
        prop_assert!(psnr(&a, &near, 1.0).unwrap() > psnr(&a, &far, 1.0).unwrap());
    }
}

/// Four flat colours with pixel noise.
fn dataset(n_per: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    let colours = [[0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9], [0.8, 0.8, 0.2]];
    let mut r = rng(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..4 * n_per {
        let k = i % 4;
        let data = (0..6 * 6 * 3).map(|j| (colours[k][j % 3] + r.random_range(-0.2..0.2f64)).clamp(0.0, 1.0)).collect();
        images.push(Tensor::new(&[6, 6, 3], data).unwrap());
        labels.push(k);
    }
    (images, labels)
}

fn trained_probe() -> (Probe, Vec<Tensor>, Vec<usize>) {
    let (images, labels) = dataset(20, 9);
    let probe = Probe::train(&images, &labels, 4, ProbeConfig::default()).unwrap();
    (probe, images, labels)
}

#[test]
fn probe_learns_and_scores_references() {
    let (probe, images, labels) = trained_probe();
    assert!(probe.train_accuracy.unwrap() >= PROBE_MIN_ACCURACY);
    let (test, test_labels) = dataset(10, 10);
    let ref_acc = probe.accuracy(&test, &test_labels).unwrap();
    let m = probe_metrics(&test, &test_labels, Some(&test), &probe).unwrap();
    assert_eq!(m.pdist, Some(0.0));
    assert_eq!(m.acc, ref_acc);
    assert!(ref_acc > 0.95);
    assert_eq!(probe.features(&images[..3]).unwrap().shape(), &[3, ProbeConfig::default().hidden]);
    assert_eq!(probe.predict(&images[..4]).unwrap(), labels[..4].to_vec());
}

#[test]
fn permuted_labels_and_noise_score_near_chance() {
    let (probe, _, _) = trained_probe();
    let (test, labels) = dataset(50, 11);
    let mut shuffled = labels.clone();
    let mut r = rng(12);
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, r.random_range(0..=i));
    }
    let acc = probe_metrics(&test, &shuffled, None, &probe).unwrap().acc;
    assert!((acc - 0.25).abs() < 0.1, "{acc}");

    let mut total = 0.0;
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let noise: Vec<Tensor> = (0..200)
            .map(|_| Tensor::randn(&[6, 6, 3], 0.25, &mut r).map(|v| (v + 0.5).clamp(0.0, 1.0)))
            .collect();
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let acc = probe_metrics(&noise, &labels, None, &probe).unwrap().acc;
        assert!((acc - 0.25).abs() <= 0.1, "seed {seed}: {acc}");
        total += acc;
    }
    assert!((total / 5.0 - 0.25).abs() < 0.1);
}

#[test]
fn untrained_or_weak_probe_is_refused() {
    let (images, labels) = dataset(2, 13);
    let fresh = Probe::new(6 * 6 * 3, 4, ProbeConfig::default());
    assert!(matches!(probe_metrics(&images, &labels, None, &fresh), Err(CoreError::Contract(_))));
    let mut weak = fresh.clone();
    weak.train_accuracy = Some(0.5);
    assert!(matches!(probe_metrics(&images, &labels, None, &weak), Err(CoreError::Contract(_))));
}

#[test]
fn probe_save_load_round_trip() {
    let (probe, images, _) = trained_probe();
    let dir = tempfile::tempdir().unwrap();
    probe.save(dir.path()).unwrap();
    let loaded = Probe::load(dir.path()).unwrap();
    assert_eq!(loaded, probe);
    assert_eq!(loaded.features(&images).unwrap(), probe.features(&images).unwrap());
}

#[test]
fn probe_training_is_reproducible() {
    let (images, labels) = dataset(5, 14);
    let cfg = ProbeConfig { steps: 20, ..ProbeConfig::default() };
    let a = Probe::train(&images, &labels, 4, cfg).unwrap();
    let b = Probe::train(&images, &labels, 4, cfg).unwrap();
    assert_eq!(a, b);
}
