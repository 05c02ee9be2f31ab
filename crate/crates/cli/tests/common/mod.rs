#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neurimg_cli::{RunConfig, SynthSpec};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neurimg"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn neurimg")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn tiny_spec() -> SynthSpec {
    SynthSpec {
        image_size: 8,
        train_per_class: 8,
        test_per_class: 4,
        ..SynthSpec::default()
    }
}

/// A run configuration small enough to train in well under a second.
pub fn tiny_run(data: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        sample_steps: 4,
        samples: 4,
        checkpoint_every: 0,
        ..RunConfig::default()
    };
    let m = &mut cfg.model;
    m.image_size = 8;
    m.depth = 1;
    m.d_model = 16;
    m.heads = 2;
    m.time_dim = 16;
    m.text_len = 4;
    m.d_text = 16;
    m.d_pooled = 8;
    m.vocab = 64;
    m.conv_widths = vec![4, 4, 4];
    m.conv_kernel = 3;
    m.eeg_tokens = 2;
    m.lora_rank = 2;
    m.lora_alpha = 4.0;
    cfg.train.base_steps = 3;
    cfg.train.adapter_steps = 3;
    cfg.train.batch = 4;
    cfg
}

/// Tiny synthetic data and a config file pointing at it.
pub struct Workspace {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: PathBuf,
}

pub fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    neurimg_cli::synth::gen_synthetic(&tiny_spec(), 3, &data).unwrap();
    let config = dir.path().join("run.json");
    tiny_run(&data, &out).save(&config).unwrap();
    Workspace { dir, data, out, config }
}

impl Workspace {
    pub fn neurimg(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut args = vec![cmd, "--config", self.config.to_str().unwrap()];
        args.extend_from_slice(extra);
        run(&args)
    }
}

/// Every file under `dir` by relative path.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
