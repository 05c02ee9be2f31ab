//! Run configuration: one JSON document, every field overridable with
//! `--key value` on the command line.

use std::path::{Path, PathBuf};

use neurimg_core::{Mode, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{usage, CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory with `train/` and `test/` splits.
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    /// Conditioning mode for sampling and evaluation.
    pub mode: Mode,
    /// Write a checkpoint every this many steps; 0 only at the end.
    pub checkpoint_every: usize,
    /// Euler steps per generated image.
    pub sample_steps: usize,
    /// Generated images per class.
    pub samples: usize,
    /// Checkpoint to sample from; defaults to `<out>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    /// Generated-image directory to evaluate; defaults to the samples of `mode`.
    pub gen: Option<PathBuf>,
    /// Trained probe directory; trained on the training split when absent.
    pub probe: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
            seed: 0,
            mode: Mode::Text,
            checkpoint_every: 500,
            sample_steps: 32,
            samples: 16,
            checkpoint: None,
            resume: None,
            gen: None,
            probe: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Model and training configs with the run seed applied.
    pub fn seeded(&self) -> (ModelConfig, TrainConfig) {
        let mut m = self.model.clone();
        let mut t = self.train.clone();
        m.seed = self.seed;
        t.seed = self.seed;
        (m, t)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint"))
    }

    pub fn samples_dir(&self, mode: Mode) -> PathBuf {
        self.out.join("samples").join(mode.name().replace('+', "_"))
    }

    pub fn gen_dir(&self) -> PathBuf {
        self.gen.clone().unwrap_or_else(|| self.samples_dir(self.mode))
    }

    pub fn validate(&self) -> Result<()> {
        let (m, t) = self.seeded();
        m.validate()?;
        t.validate()?;
        if self.sample_steps == 0 {
            return Err(usage("sample_steps must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Parses a command-line value: JSON if it parses, else a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `key` in `doc`. A dotted key names a nested field; a bare key is
/// set wherever it occurs at the top level or in a direct sub-object, so
/// `seed` reaches every section that has one.
pub fn set_key(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let key = key.replace('-', "_");
    let unknown = || usage(format!("unknown configuration key `{key}`"));
    if key.contains('.') {
        let mut cur = &mut *doc;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            cur = cur.get_mut(*p).ok_or_else(unknown)?;
        }
        let slot = cur.get_mut(parts[parts.len() - 1]).ok_or_else(unknown)?;
        *slot = value;
        return Ok(());
    }
    let obj = doc.as_object_mut().ok_or_else(unknown)?;
    let mut hit = false;
    if let Some(slot) = obj.get_mut(&key) {
        *slot = value.clone();
        hit = true;
    }
    for (_, section) in obj.iter_mut() {
        if let Some(slot) = section.as_object_mut().and_then(|s| s.get_mut(&key)) {
            *slot = value.clone();
            hit = true;
        }
    }
    if hit {
        Ok(())
    } else {
        Err(unknown())
    }
}

/// Applies `--key value` pairs to a serializable config. `--steps N` is
/// shorthand for a total of `N` training steps, three quarters in the base
/// phase and the rest in the adapter phase.
pub fn apply_overrides<T>(base: &T, args: &[String]) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut doc = serde_json::to_value(base)?;
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| usage(format!("expected --key, got `{flag}`")))?;
        let raw = it.next().ok_or_else(|| usage(format!("--{key} needs a value")))?;
        if key == "steps" && doc.get("train").is_some() {
            let n: usize = raw.parse().map_err(|_| usage(format!("--steps takes a count, got `{raw}`")))?;
            set_key(&mut doc, "train.base_steps", Value::from(n - n / 4))?;
            set_key(&mut doc, "train.adapter_steps", Value::from(n / 4))?;
            continue;
        }
        set_key(&mut doc, key, parse_value(raw))?;
    }
    serde_json::from_value(doc).map_err(|e| usage(format!("invalid configuration: {e}")))
}

/// Loads `--config <path>` if present among `args`, then applies the
/// remaining pairs as overrides.
pub fn resolve<T>(args: &[String]) -> Result<T>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let mut rest = Vec::with_capacity(args.len());
    let mut base: Option<T> = None;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let path = it.next().ok_or_else(|| usage("--config needs a path"))?;
            let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
            base = Some(serde_json::from_slice(&bytes).map_err(|e| usage(format!("{path}: {e}")))?);
        } else {
            rest.push(a.clone());
        }
    }
    apply_overrides(&base.unwrap_or_default(), &rest)
}
