mod common;

use common::{run, workspace};
use neurimg_cli::config::{apply_overrides, resolve};
use neurimg_cli::{CliError, RunConfig, SynthSpec};
use neurimg_core::{MaskMode, Mode};

fn args(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.model.depth = 2;
    cfg.mode = Mode::TextEeg;
    let path = dir.path().join("c.json");
    cfg.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}

#[test]
fn overrides_reach_nested_fields() {
    let cfg: RunConfig = apply_overrides(
        &RunConfig::default(),
        &args("--model.depth 2 --mask-mode literal --mode text+eeg --train.lr 0.5 --model.conv_widths [3,4,5]"),
    )
    .unwrap();
    assert_eq!(cfg.model.depth, 2);
    assert_eq!(cfg.model.mask_mode, MaskMode::Literal);
    assert_eq!(cfg.mode, Mode::TextEeg);
    assert_eq!(cfg.train.lr, 0.5);
    assert_eq!(cfg.model.conv_widths, vec![3, 4, 5]);
}

#[test]
fn bare_seed_sets_every_section() {
    let cfg: RunConfig = apply_overrides(&RunConfig::default(), &args("--seed 9")).unwrap();
    assert_eq!((cfg.seed, cfg.model.seed, cfg.train.seed), (9, 9, 9));
}

#[test]
fn steps_splits_between_phases() {
    let cfg: RunConfig = apply_overrides(&RunConfig::default(), &args("--steps 2000")).unwrap();
    assert_eq!((cfg.train.base_steps, cfg.train.adapter_steps), (1500, 500));
    let cfg: RunConfig = apply_overrides(&RunConfig::default(), &args("--steps 0")).unwrap();
    assert_eq!(cfg.train.total_steps(), 0);
    let cfg: RunConfig = apply_overrides(&RunConfig::default(), &args("--steps 7")).unwrap();
    assert_eq!((cfg.train.base_steps, cfg.train.adapter_steps), (6, 1));
}

#[test]
fn bad_overrides_are_usage_errors() {
    for bad in ["--nonsense 1", "--model.nonsense 1", "--model.depth two", "depth 2", "--seed"] {
        let r: Result<RunConfig, _> = apply_overrides(&RunConfig::default(), &args(bad));
        assert!(matches!(r, Err(CliError::Usage(_))), "{bad}");
    }
}

#[test]
fn resolve_loads_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    let spec = SynthSpec { train_per_class: 3, ..SynthSpec::default() };
    std::fs::write(&path, serde_json::to_vec(&spec).unwrap()).unwrap();
    let got: SynthSpec = resolve(&args(&format!("--config {} --test_per_class 2", path.display()))).unwrap();
    assert_eq!(got, SynthSpec { test_per_class: 2, ..spec });
    let missing: Result<SynthSpec, _> = resolve(&args("--config /nonexistent/s.json"));
    assert!(matches!(missing, Err(CliError::Io(_))));
}

#[test]
fn exit_codes() {
    let ws = workspace();
    assert_eq!(ws.neurimg("train", &["--nonsense", "1"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--config", "/nonexistent/run.json"]).status.code(), Some(3));
    let other = ws.dir.path().join("nowhere");
    assert_eq!(
        ws.neurimg("train", &["--data", other.to_str().unwrap()]).status.code(),
        Some(3)
    );
    assert_eq!(run(&["mask", "x:2,txt:1", "--mask-mode", "sideways"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
