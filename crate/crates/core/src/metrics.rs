//! Pixel metrics and the small classifier probe used for semantic scores.

use std::path::Path;

use neurimg_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, Result};
use crate::flow::{AdamW, AdamWConfig};
use crate::params::{Binder, ParamStore};

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!("metric inputs {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Mean squared difference.
pub fn l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(peak² / mse)`; identical inputs give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let mse = l2(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 8;

/// Luma of an `H × W × 3` image, or the single channel of `H × W × 1`.
pub fn grayscale(img: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let &[h, w, ch] = img.shape() else {
        return Err(dim_err(format!("image must be H×W×ch, got {:?}", img.shape())));
    };
    let g = match ch {
        1 => img.data().to_vec(),
        3 => img
            .data()
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect(),
        _ => return Err(dim_err(format!("{ch} channels; expected 1 or 3"))),
    };
    Ok((h, w, g))
}

/// Summed-area table with a zero first row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// Mean SSIM over every `8 × 8` window (stride 1) of the grayscale images,
/// with population window statistics.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, ga) = grayscale(a)?;
    let (_, _, gb) = grayscale(b)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(dim_err(format!("SSIM needs at least {k}×{k}, got {h}×{w}")));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let sa = integral(h, w, |i| ga[i]);
    let sb = integral(h, w, |i| gb[i]);
    let saa = integral(h, w, |i| ga[i] * ga[i]);
    let sbb = integral(h, w, |i| gb[i] * gb[i]);
    let sab = integral(h, w, |i| ga[i] * gb[i]);
    let box_sum = |s: &[f64], y: usize, x: usize| {
        let w1 = w + 1;
        s[(y + k) * w1 + x + k] - s[y * w1 + x + k] - s[(y + k) * w1 + x] + s[y * w1 + x]
    };
    let n = (k * k) as f64;
    let mut total = 0.0;
    let windows = (h - k + 1) * (w - k + 1);
    for y in 0..=h - k {
        for x in 0..=w - k {
            let ma = box_sum(&sa, y, x) / n;
            let mb = box_sum(&sb, y, x) / n;
            let va = box_sum(&saa, y, x) / n - ma * ma;
            let vb = box_sum(&sbb, y, x) / n - mb * mb;
            let cab = box_sum(&sab, y, x) / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / windows as f64)
}

/// A one-hidden-layer classifier over flattened images. The hidden
/// activations are the feature space for perceptual distance.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    params: ParamStore,
    pub classes: usize,
    /// Accuracy on the training set, once trained.
    pub train_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    input: usize,
    hidden: usize,
    classes: usize,
    train_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 300,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Minimum training accuracy for a probe to be usable.
pub const PROBE_MIN_ACCURACY: f64 = 0.99;

fn flatten(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| contract("no images"))?;
    let d = first.len();
    let mut data = Vec::with_capacity(images.len() * d);
    for img in images {
        if img.shape() != first.shape() {
            return Err(dim_err(format!("image {:?} among {:?}", img.shape(), first.shape())));
        }
        data.extend(img.data().iter().map(|v| 2.0 * v - 1.0));
    }
    Ok(Tensor::new(&[images.len(), d], data)?)
}

impl Probe {
    pub fn new(input: usize, classes: usize, cfg: ProbeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        params.insert("w1", Tensor::randn(&[input, cfg.hidden], 1.0 / (input as f64).sqrt(), &mut rng), true);
        params.insert("b1", Tensor::zeros(&[cfg.hidden]), true);
        params.insert("w2", Tensor::randn(&[cfg.hidden, classes], 1.0 / (cfg.hidden as f64).sqrt(), &mut rng), true);
        params.insert("b2", Tensor::zeros(&[classes]), true);
        Self {
            params,
            classes,
            train_accuracy: None,
        }
    }

    fn forward(&self, tape: &mut Tape, b: &mut Binder, x: Tensor) -> Result<(neurimg_tensor::Var, neurimg_tensor::Var)> {
        let x = tape.constant(x);
        let (w1, b1, w2, b2) = (b.var(tape, "w1")?, b.var(tape, "b1")?, b.var(tape, "w2")?, b.var(tape, "b2")?);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.gelu(h);
        let y = tape.matmul(h, w2)?;
        Ok((h, tape.add_bias(y, b2)?))
    }

    /// Full-batch Adam on cross-entropy.
    pub fn train(images: &[Tensor], labels: &[usize], classes: usize, cfg: ProbeConfig) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(dim_err(format!("{} images, {} labels", images.len(), labels.len())));
        }
        let x = flatten(images)?;
        let mut probe = Self::new(x.cols(), classes, cfg);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..cfg.steps {
            let mut tape = Tape::new();
            let mut b = Binder::new(&probe.params, true);
            let (_, logits) = probe.forward(&mut tape, &mut b, x.clone())?;
            let loss = tape.cross_entropy(logits, labels)?;
            tape.backward(loss)?;
            let mut grads = vec![None; probe.params.len()];
            for (i, g) in b.grads(&tape) {
                grads[i] = Some(g);
            }
            opt.update(&mut probe.params, &grads, cfg.lr);
        }
        probe.train_accuracy = Some(probe.accuracy(images, labels)?);
        Ok(probe)
    }

    /// `(hidden features, logits)` per image.
    fn eval(&self, images: &[Tensor]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let (h, y) = self.forward(&mut tape, &mut b, flatten(images)?)?;
        Ok((tape.value(h).clone(), tape.value(y).clone()))
    }

    pub fn features(&self, images: &[Tensor]) -> Result<Tensor> {
        Ok(self.eval(images)?.0)
    }

    pub fn predict(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        let (_, logits) = self.eval(images)?;
        Ok((0..logits.rows())
            .map(|r| {
                logits
                    .row(r)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, images: &[Tensor], labels: &[usize]) -> Result<f64> {
        let pred = self.predict(images)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.save(dir, "probe.")?;
        let w1 = self.params.get("w1")?;
        let meta = ProbeMeta {
            input: w1.rows(),
            hidden: w1.cols(),
            classes: self.classes,
            train_accuracy: self.train_accuracy,
        };
        std::fs::write(dir.join("probe.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ProbeMeta = serde_json::from_slice(&std::fs::read(dir.join("probe.json"))?)?;
        let cfg = ProbeConfig {
            hidden: meta.hidden,
            ..ProbeConfig::default()
        };
        let mut probe = Self::new(meta.input, meta.classes, cfg);
        probe.params.load(dir, "probe.")?;
        probe.train_accuracy = meta.train_accuracy;
        Ok(probe)
    }

    fn check_trained(&self) -> Result<()> {
        match self.train_accuracy {
            Some(a) if a >= PROBE_MIN_ACCURACY => Ok(()),
            Some(a) => Err(contract(format!("probe training accuracy {a:.3} is below {PROBE_MIN_ACCURACY}"))),
            None => Err(contract("probe has not been trained")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeMetrics {
    /// Fraction of images classified as their conditioning class.
    pub acc: f64,
    /// Mean feature-space L2 distance to the paired reference, if given.
    pub pdist: Option<f64>,
}

pub fn probe_metrics(generated: &[Tensor], labels: &[usize], references: Option<&[Tensor]>, probe: &Probe) -> Result<ProbeMetrics> {
    probe.check_trained()?;
    if generated.len() != labels.len() {
        return Err(dim_err(format!("{} images, {} labels", generated.len(), labels.len())));
    }
    let acc = probe.accuracy(generated, labels)?;
    let pdist = match references {
        None => None,
        Some(refs) => {
            if refs.len() != generated.len() {
                return Err(dim_err(format!("{} generated, {} references", generated.len(), refs.len())));
            }
            let fg = probe.features(generated)?;
            let fr = probe.features(refs)?;
            let total: f64 = (0..fg.rows())
                .map(|r| fg.row(r).iter().zip(fr.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .sum();
            Some(total / fg.rows() as f64)
        }
    };
    Ok(ProbeMetrics { acc, pdist })
}
