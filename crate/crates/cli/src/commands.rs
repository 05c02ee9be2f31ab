//! Subcommand implementations, callable without the binary.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use neurimg_core::flow::sample_image;
use neurimg_core::metrics::probe_metrics;
use neurimg_core::tokens::layout_from_sizes;
use neurimg_core::train::{eval_fm_loss, load_model};
use neurimg_core::{build_mutual_mask, l1, l2, parse_layout, psnr, ssim, CondInput, MaskMode, Mode, Model, Probe, ProbeConfig, Trainer};
use neurimg_eeg::io::{read_recording, write_epochs};
use neurimg_eeg::PreprocessConfig;
use neurimg_tensor::{OpKind, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{usage, CliError, Result};
use crate::gradcheck::{report, run_suite};
use crate::ppm::{read_ppm, write_ppm};
use crate::synth::{gen_synthetic, load_split, Split, SynthSpec, MANIFEST_FILE};

pub fn cmd_synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<String> {
    gen_synthetic(spec, seed, out)?;
    Ok(format!(
        "wrote {} train and {} test pairs to {}\n",
        spec.train_per_class * spec.classes,
        spec.test_per_class * spec.classes,
        out.display()
    ))
}

/// Filters, epochs and standardizes a recording given by its manifest.
pub fn cmd_preprocess(manifest: &Path, cfg: &PreprocessConfig, out: &Path) -> Result<String> {
    let rec = read_recording(manifest)?;
    let set = neurimg_eeg::preprocess(&rec, cfg)?;
    write_epochs(&set.epochs, out)?;
    Ok(format!(
        "wrote {} epochs to {} ({} skipped out of bounds)\n",
        set.epochs.len(),
        out.display(),
        set.skipped
    ))
}

/// Number of held-out examples the flow-matching loss is tracked on.
pub const FM_EVAL_SIZE: usize = 64;
pub const LOSS_HEADER: &str = "step,phase,lr,loss,fm_loss,grad_norm";
pub const FM_HEADER: &str = "step,mode,fm_loss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmEval {
    pub step: usize,
    pub mode: Mode,
    pub fm_loss: f64,
}

fn fm_evals(model: &Model, eval: &[neurimg_core::Example], step: usize, seed: u64) -> Result<Vec<FmEval>> {
    Mode::ALL
        .iter()
        .map(|&mode| {
            Ok(FmEval {
                step,
                mode,
                fm_loss: eval_fm_loss(model, eval, mode, seed)?,
            })
        })
        .collect()
}

/// Keeps the header and the rows whose leading step is below `step`.
fn truncate_csv(path: &Path, header: &str, step: usize) -> Result<Vec<String>> {
    let mut lines = vec![header.to_string()];
    if let Ok(text) = std::fs::read_to_string(path) {
        lines.extend(
            text.lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < step))
                .map(str::to_string),
        );
    }
    Ok(lines)
}

fn open_csv(path: &Path, lines: &[String]) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(w)
}

/// Trains to `base_steps + adapter_steps`, writing `loss.csv`, `fm_eval.csv`,
/// periodic checkpoints under `checkpoints/` and the last one as
/// `checkpoint/`. With `resume`, continues from that checkpoint and rewrites
/// the logs as the uninterrupted run would have.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<FmEval>> {
    cfg.validate()?;
    let train = load_split(&cfg.data, "train")?;
    let test = load_split(&cfg.data, "test")?;
    let eval: Vec<_> = test.examples.iter().take(FM_EVAL_SIZE).cloned().collect();
    std::fs::create_dir_all(&cfg.out)?;
    cfg.save(&cfg.out.join("run.json"))?;

    let (mcfg, tcfg) = cfg.seeded();
    let mut trainer = match &cfg.resume {
        Some(dir) => {
            let t = Trainer::load(dir)?;
            if t.config != tcfg || t.model.config != mcfg {
                return Err(usage(format!("{} was trained with a different configuration", dir.display())));
            }
            t
        }
        None => Trainer::new(Model::new(mcfg)?, tcfg)?,
    };
    let start = trainer.step;
    let total = trainer.config.total_steps();
    let loss_path = cfg.out.join("loss.csv");
    let fm_path = cfg.out.join("fm_eval.csv");
    let mut loss_csv = open_csv(&loss_path, &truncate_csv(&loss_path, LOSS_HEADER, start)?)?;
    let mut fm_csv = open_csv(&fm_path, &truncate_csv(&fm_path, FM_HEADER, start + 1)?)?;
    let mut evals = Vec::new();
    let mut record = |fm_csv: &mut BufWriter<File>, model: &Model, step: usize| -> Result<()> {
        for e in fm_evals(model, &eval, step, cfg.seed)? {
            writeln!(fm_csv, "{},{},{}", e.step, e.mode, e.fm_loss)?;
            evals.push(e);
        }
        fm_csv.flush()?;
        Ok(())
    };
    if start == 0 {
        record(&mut fm_csv, &trainer.model, 0)?;
    }
    while trainer.step < total {
        let step = trainer.step;
        let lr = trainer.lr(step);
        let phase = trainer.phase(step);
        let r = match trainer.step(&train.examples) {
            Ok(r) => r,
            Err(e) => {
                loss_csv.flush()?;
                return Err(e.into());
            }
        };
        writeln!(
            loss_csv,
            "{step},{},{lr},{},{},{}",
            if phase == neurimg_core::Phase::Base { "base" } else { "adapter" },
            r.loss,
            r.fm_loss,
            r.grad_norm
        )?;
        if step % 100 == 0 {
            log::info!("step {step}/{total} loss {:.4} fm {:.4}", r.loss, r.fm_loss);
            loss_csv.flush()?;
        }
        let done = trainer.step;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < total {
            trainer.save(&cfg.out.join("checkpoints").join(format!("step-{done:06}")))?;
            record(&mut fm_csv, &trainer.model, done)?;
        }
    }
    loss_csv.flush()?;
    trainer.save(&cfg.out.join("checkpoint"))?;
    if total > 0 && total > start {
        record(&mut fm_csv, &trainer.model, total)?;
    }
    Ok(evals)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub label: usize,
    pub prompt: String,
    pub mode: Mode,
    /// Image path relative to the sample directory.
    pub image: String,
    /// Id of the paired reference row in the test split.
    pub reference: String,
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_add(1)
}

/// The first `n` test rows of each class.
pub fn pick_rows(split: &Split, n: usize) -> Vec<usize> {
    let classes = split.rows.iter().map(|r| r.label + 1).max().unwrap_or(0);
    (0..classes)
        .flat_map(|k| split.rows.iter().enumerate().filter(move |(_, r)| r.label == k).take(n).map(|(i, _)| i))
        .collect()
}

pub fn cond_input(mode: Mode, prompt: &str, epoch: &Tensor) -> CondInput {
    match mode {
        Mode::Text => CondInput::text(prompt),
        Mode::Eeg => CondInput::eeg(epoch.clone()),
        Mode::TextEeg => CondInput::text_eeg(prompt, epoch.clone()),
    }
}

/// Generates `samples` images per class for `cfg.mode`, each paired with a
/// test row and seeded by its position.
pub fn cmd_sample(cfg: &RunConfig) -> Result<Vec<SampleRow>> {
    let model = load_model(&cfg.checkpoint_dir())?;
    let test = load_split(&cfg.data, "test")?;
    let picks = pick_rows(&test, cfg.samples);
    let dir = cfg.samples_dir(cfg.mode);
    std::fs::create_dir_all(&dir)?;
    let images: Vec<Tensor> = picks
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            let ex = &test.examples[r];
            let input = cond_input(cfg.mode, &ex.prompt, &ex.epoch);
            Ok(sample_image(&model, &input, cfg.sample_steps, sample_seed(cfg.seed, i))?)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(picks.len());
    for (i, (&r, img)) in picks.iter().zip(&images).enumerate() {
        let src = &test.rows[r];
        let id = format!("gen-{i:05}");
        let image = format!("{id}.ppm");
        write_ppm(&dir.join(&image), img)?;
        rows.push(SampleRow {
            id,
            label: src.label,
            prompt: src.prompt.clone(),
            mode: cfg.mode,
            image,
            reference: src.id.clone(),
        });
    }
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&rows)?)?;
    Ok(rows)
}

pub const METRICS_HEADER: &str = "metric,value,n,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let v = if r.value == f64::INFINITY { "inf".to_string() } else { r.value.to_string() };
        let _ = writeln!(s, "{},{v},{},{}", r.metric, r.n, r.seed);
    }
    s
}

/// Loads the probe at `cfg.probe`, or trains one on the training split and
/// stores it under `<out>/probe`.
pub fn obtain_probe(cfg: &RunConfig) -> Result<Probe> {
    if let Some(dir) = &cfg.probe {
        return Ok(Probe::load(dir)?);
    }
    let train = load_split(&cfg.data, "train")?;
    let classes = train.rows.iter().map(|r| r.label + 1).max().unwrap_or(0);
    let probe = Probe::train(
        &train.images(),
        &train.labels(),
        classes,
        ProbeConfig {
            seed: cfg.seed,
            ..ProbeConfig::default()
        },
    )?;
    probe.save(&cfg.out.join("probe"))?;
    Ok(probe)
}

/// Pixel and probe metrics of generated images against their paired
/// references. Rows whose reference is missing are reported and skipped.
pub fn evaluate(gen_dir: &Path, test: &Split, probe: &Probe, seed: u64) -> Result<(Vec<MetricRow>, Vec<String>)> {
    let rows = read_samples(gen_dir)?;
    let mut unpaired = Vec::new();
    let mut pairs = Vec::new();
    for r in &rows {
        match test.rows.iter().position(|t| t.id == r.reference) {
            Some(i) => pairs.push((r, i)),
            None => unpaired.push(r.id.clone()),
        }
    }
    if pairs.is_empty() {
        return Err(usage(format!("no generated image in {} pairs with a reference", gen_dir.display())));
    }
    let gen: Vec<Tensor> = pairs.iter().map(|(r, _)| read_ppm(&gen_dir.join(&r.image))).collect::<Result<_>>()?;
    let refs: Vec<Tensor> = pairs.iter().map(|&(_, i)| test.examples[i].image.clone()).collect();
    let labels: Vec<usize> = pairs.iter().map(|(r, _)| r.label).collect();
    let n = gen.len();
    let per_pair: Vec<[f64; 4]> = gen
        .par_iter()
        .zip(&refs)
        .map(|(g, r)| Ok([l1(g, r)?, l2(g, r)?, psnr(g, r, 1.0)?, ssim(g, r, 1.0)?]))
        .collect::<std::result::Result<_, neurimg_core::CoreError>>()?;
    let mean = |k: usize| per_pair.iter().map(|m| m[k]).sum::<f64>() / n as f64;
    let pm = probe_metrics(&gen, &labels, Some(&refs), probe)?;
    let mode = pairs[0].0.mode;
    let mut out = Vec::new();
    for (k, name) in ["l1", "l2", "psnr", "ssim"].iter().enumerate() {
        out.push(MetricRow {
            metric: format!("{mode}/{name}"),
            value: mean(k),
            n,
            seed,
        });
    }
    out.push(MetricRow {
        metric: format!("{mode}/acc"),
        value: pm.acc,
        n,
        seed,
    });
    out.push(MetricRow {
        metric: format!("{mode}/pdist"),
        value: pm.pdist.unwrap_or(f64::NAN),
        n,
        seed,
    });
    Ok((out, unpaired))
}

/// Writes `metrics.csv` next to the generated images and returns its text.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let probe = obtain_probe(cfg)?;
    let test = load_split(&cfg.data, "test")?;
    let gen_dir = cfg.gen_dir();
    let (rows, unpaired) = evaluate(&gen_dir, &test, &probe, cfg.seed)?;
    for id in &unpaired {
        log::warn!("{id} has no reference row; skipped");
    }
    let csv = metrics_csv(&rows);
    std::fs::write(gen_dir.join("metrics.csv"), &csv)?;
    Ok(csv)
}

pub fn cmd_mask(layout: &str, mode: MaskMode) -> Result<String> {
    let sizes = parse_layout(layout)?;
    let layout = layout_from_sizes(&sizes);
    Ok(build_mutual_mask(&layout.block_sets(), mode)?.dump())
}

/// The report and whether every check passed.
pub fn cmd_gradcheck(fault: Option<&str>) -> Result<(String, bool)> {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| usage(format!("unknown op `{name}`")))?),
    };
    let results = run_suite(fault)?;
    Ok((report(&results), results.iter().all(|r| r.passed())))
}

/// Reads a generated-sample manifest.
pub fn read_samples(dir: &Path) -> Result<Vec<SampleRow>> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}
