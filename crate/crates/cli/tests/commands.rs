mod common;

use std::path::Path;

use common::{run, stdout, tiny_run, workspace};
use neurimg_cli::commands::{cmd_eval, cmd_mask, cmd_sample, cmd_train, read_samples, SampleRow, METRICS_HEADER};
use neurimg_cli::ppm::write_ppm;
use neurimg_cli::synth::{load_split, MANIFEST_FILE};
use neurimg_core::train::load_model;
use neurimg_core::{MaskMode, Mode, Model};

const LAYOUTS: [&str; 5] = [
    "x:1,txt:1",
    "x:2,y1:1,txt:2",
    "x:4,y1:4,e:2,txt:3",
    "x:3,y1:2,y2:2,e:1,txt:2",
    "y2:2,x:3,txt:1,y1:1",
];

fn golden(layout: &str, mode: &str) -> String {
    let name = layout.replace(':', "").replace(',', "_");
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("tests/fixtures/masks/{name}.{mode}.txt"));
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn mask_dumps_match_goldens() {
    for layout in LAYOUTS {
        for (mode, name) in [(MaskMode::Literal, "literal"), (MaskMode::Hub, "hub")] {
            assert_eq!(cmd_mask(layout, mode).unwrap(), golden(layout, name), "{layout} {name}");
            let out = run(&["mask", layout, "--mask-mode", name]);
            assert!(out.status.success());
            assert_eq!(stdout(&out), golden(layout, name));
        }
    }
}

#[test]
fn mask_rejects_bad_layouts() {
    for bad in ["x:0,txt:1", "x:2,x:2", "q:1", ""] {
        assert_eq!(run(&["mask", bad]).status.code(), Some(1), "{bad}");
    }
}

#[test]
fn gradcheck_clean_and_faulted() {
    let clean = run(&["gradcheck"]);
    let report = stdout(&clean);
    assert!(clean.status.success(), "{report}");
    for op in ["add", "matmul", "softmax", "layer_norm", "rotary", "unfold1d", "denoiser[text+eeg]", "denoiser[eeg]"] {
        assert!(report.lines().any(|l| l.starts_with(op) && l.ends_with(" ok")), "{op} missing from\n{report}");
    }
    assert!(report.ends_with(" 0 failed\n"));

    let faulted = run(&["gradcheck", "--inject-fault", "softmax"]);
    let report = stdout(&faulted);
    assert_eq!(faulted.status.code(), Some(2));
    let failed: Vec<&str> = report.lines().filter(|l| l.ends_with("FAILED")).collect();
    assert!(failed.iter().any(|l| l.starts_with("softmax ")), "{report}");
    assert!(failed.iter().any(|l| l.starts_with("denoiser")), "{report}");
    assert!(!failed.iter().any(|l| l.starts_with("matmul ")));

    assert_eq!(run(&["gradcheck", "--inject-fault", "nonsense"]).status.code(), Some(1));
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let ws = workspace();
    let out = ws.neurimg("train", &["--steps", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let loaded = load_model(&ws.out.join("checkpoint")).unwrap();
    let mut cfg = tiny_run(&ws.data, &ws.out);
    cfg.train.base_steps = 0;
    cfg.train.adapter_steps = 0;
    let init = Model::new(cfg.seeded().0).unwrap();
    assert_eq!(loaded.params.len(), init.params.len());
    for (name, p) in init.params.iter() {
        assert_eq!(loaded.params.get(name).unwrap(), &p.value, "{name}");
    }
    let fm = std::fs::read_to_string(ws.out.join("fm_eval.csv")).unwrap();
    assert_eq!(fm.lines().count(), 4);
}

#[test]
fn training_writes_logs_and_checkpoints() {
    let ws = workspace();
    let mut cfg = tiny_run(&ws.data, &ws.out);
    cfg.checkpoint_every = 2;
    let evals = cmd_train(&cfg).unwrap();
    assert_eq!(evals.len(), 3 * 4);
    let loss = std::fs::read_to_string(ws.out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "step,phase,lr,loss,fm_loss,grad_norm");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("0,base,") && lines[6].starts_with("5,adapter,"));
    for step in [2, 4] {
        assert!(ws.out.join(format!("checkpoints/step-{step:06}")).is_dir());
    }
    assert!(ws.out.join("checkpoint").is_dir());
}

#[test]
fn resume_rewrites_logs_as_uninterrupted() {
    let ws = workspace();
    let mut cfg = tiny_run(&ws.data, &ws.out);
    cfg.checkpoint_every = 2;
    cmd_train(&cfg).unwrap();
    let straight_loss = std::fs::read(ws.out.join("loss.csv")).unwrap();
    let straight_fm = std::fs::read(ws.out.join("fm_eval.csv")).unwrap();
    let straight_ckpt = common::tree(&ws.out.join("checkpoint"));
    cfg.resume = Some(ws.out.join("checkpoints/step-000004"));
    cmd_train(&cfg).unwrap();
    assert_eq!(std::fs::read(ws.out.join("loss.csv")).unwrap(), straight_loss);
    assert_eq!(std::fs::read(ws.out.join("fm_eval.csv")).unwrap(), straight_fm);
    assert_eq!(common::tree(&ws.out.join("checkpoint")), straight_ckpt);

    cfg.train.lr *= 2.0;
    assert!(cmd_train(&cfg).is_err());
}

#[test]
fn sampling_counts_and_determinism() {
    let ws = workspace();
    assert!(ws.neurimg("train", &[]).status.success());
    for mode in ["text", "eeg", "text+eeg"] {
        let out = ws.neurimg("sample", &["--mode", mode]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut cfg = tiny_run(&ws.data, &ws.out);
    for mode in Mode::ALL {
        let dir = cfg.samples_dir(mode);
        let rows = read_samples(&dir).unwrap();
        assert_eq!(rows.len(), 16);
        for k in 0..4 {
            assert_eq!(rows.iter().filter(|r| r.label == k).count(), 4);
        }
        assert!(rows.iter().all(|r| r.mode == mode && dir.join(&r.image).is_file()));
    }
    cfg.mode = Mode::TextEeg;
    let first: Vec<Vec<u8>> = read_images(&cfg.samples_dir(Mode::TextEeg));
    cfg.out = ws.dir.path().join("again");
    cfg.checkpoint = Some(ws.out.join("checkpoint"));
    cmd_sample(&cfg).unwrap();
    assert_eq!(read_images(&cfg.samples_dir(Mode::TextEeg)), first);
}

fn read_images(dir: &Path) -> Vec<Vec<u8>> {
    read_samples(dir).unwrap().iter().map(|r| std::fs::read(dir.join(&r.image)).unwrap()).collect()
}

#[test]
fn evaluating_the_references_themselves() {
    let ws = workspace();
    let test = load_split(&ws.data, "test").unwrap();
    let gen = ws.dir.path().join("refs");
    std::fs::create_dir_all(&gen).unwrap();
    let mut rows = Vec::new();
    for (i, (r, ex)) in test.rows.iter().zip(&test.examples).enumerate() {
        let image = format!("r{i}.ppm");
        write_ppm(&gen.join(&image), &ex.image).unwrap();
        rows.push(SampleRow {
            id: format!("r{i}"),
            label: r.label,
            prompt: r.prompt.clone(),
            mode: Mode::Text,
            image,
            reference: r.id.clone(),
        });
    }
    std::fs::write(gen.join(MANIFEST_FILE), serde_json::to_vec(&rows).unwrap()).unwrap();
    let mut cfg = tiny_run(&ws.data, &ws.out);
    cfg.gen = Some(gen.clone());
    let csv = cmd_eval(&cfg).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    let value = |m: &str| -> String {
        let l = lines.iter().find(|l| l.starts_with(&format!("text/{m},"))).unwrap();
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!((f[2], f[3]), ("16", "0"));
        f[1].to_string()
    };
    assert_eq!(value("l1"), "0");
    assert_eq!(value("l2"), "0");
    assert_eq!(value("psnr"), "inf");
    assert_eq!(value("ssim"), "1");
    assert_eq!(value("pdist"), "0");
    let probe = neurimg_core::Probe::load(&ws.out.join("probe")).unwrap();
    let acc = probe.accuracy(&test.images(), &test.labels()).unwrap();
    assert_eq!(value("acc").parse::<f64>().unwrap(), acc);
    assert_eq!(std::fs::read_to_string(gen.join("metrics.csv")).unwrap(), csv);

    cfg.probe = Some(ws.out.join("probe"));
    assert_eq!(cmd_eval(&cfg).unwrap(), csv);
}
