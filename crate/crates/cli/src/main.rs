use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neurimg_cli::commands::{cmd_eval, cmd_gradcheck, cmd_mask, cmd_preprocess, cmd_sample, cmd_synth, cmd_train};
use neurimg_cli::config::resolve;
use neurimg_cli::error::{usage, Result};
use neurimg_cli::{RunConfig, SynthSpec};
use neurimg_core::MaskMode;
use neurimg_eeg::PreprocessConfig;

#[derive(Parser)]
#[command(name = "neurimg", version, about = "Image generation conditioned on text, EEG and context images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration flags shared by the run commands. Any field of the run
/// configuration can be set with `--key value`; dotted keys reach nested
/// fields, e.g. `--model.depth 2`.
#[derive(Args)]
struct RunArgs {
    /// JSON run configuration to start from.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// text, eeg or text+eeg.
    #[arg(long)]
    mode: Option<String>,
    /// literal or hub.
    #[arg(long)]
    mask_mode: Option<String>,
    /// Total training steps; a quarter of them train the EEG adapters.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Further `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    rest: Vec<String>,
}

impl RunArgs {
    fn flags(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(c) = &self.config {
            v.extend(["--config".to_string(), c.display().to_string()]);
        }
        v.extend(self.rest.iter().cloned());
        let mut push = |k: &str, val: Option<String>| {
            if let Some(val) = val {
                v.extend([format!("--{k}"), val]);
            }
        };
        push("seed", self.seed.map(|s| s.to_string()));
        push("mode", self.mode.clone());
        push("mask_mode", self.mask_mode.clone());
        push("steps", self.steps.map(|s| s.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        v
    }

    fn run_config(&self) -> Result<RunConfig> {
        let cfg: RunConfig = resolve(&self.flags())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Band-pass, notch, epoch and standardize a raw recording.
    Preprocess {
        /// Recording manifest (JSON) next to its sample data.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON preprocessing configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic paired image/EEG dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON dataset settings; fields may also be set with `--key value`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        rest: Vec<String>,
    },
    /// Train the denoiser, then the EEG adapters.
    Train(RunArgs),
    /// Generate images for the test split in one conditioning mode.
    Sample(RunArgs),
    /// Score generated images against their references.
    Eval(RunArgs),
    /// Print the attention mask of a layout such as `x:4,y1:4,e:2,txt:3`.
    Mask {
        layout: String,
        #[arg(long, default_value = "hub")]
        mask_mode: String,
    },
    /// Check every backward rule and the denoiser against finite differences.
    Gradcheck {
        /// Perturb one op's backward rule, e.g. `softmax`.
        #[arg(long)]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Preprocess { input, out, config } => {
            let cfg: PreprocessConfig = match config {
                Some(p) => serde_json::from_slice(&std::fs::read(&p)?)?,
                None => PreprocessConfig::default(),
            };
            print!("{}", cmd_preprocess(&input, &cfg, &out)?);
        }
        Command::Synth { out, seed, config, rest } => {
            let mut flags = Vec::new();
            if let Some(c) = config {
                flags.extend(["--config".to_string(), c.display().to_string()]);
            }
            flags.extend(rest);
            let spec: SynthSpec = resolve(&flags)?;
            print!("{}", cmd_synth(&spec, seed, &out)?);
        }
        Command::Train(a) => {
            let evals = cmd_train(&a.run_config()?)?;
            for e in evals {
                println!("step {} {} fm_loss {}", e.step, e.mode, e.fm_loss);
            }
        }
        Command::Sample(a) => {
            let cfg = a.run_config()?;
            let rows = cmd_sample(&cfg)?;
            println!("wrote {} images to {}", rows.len(), cfg.samples_dir(cfg.mode).display());
        }
        Command::Eval(a) => print!("{}", cmd_eval(&a.run_config()?)?),
        Command::Mask { layout, mask_mode } => {
            let mode: MaskMode = mask_mode.parse().map_err(|e: neurimg_core::CoreError| usage(e.to_string()))?;
            print!("{}", cmd_mask(&layout, mode)?);
        }
        Command::Gradcheck { inject_fault } => {
            let (report, ok) = cmd_gradcheck(inject_fault.as_deref())?;
            print!("{report}");
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
