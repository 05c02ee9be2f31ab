//! Two-phase training driver with per-step seeding and directory
//! checkpoints.
//!
//! The backbone first learns text-conditioned generation with every weight
//! trainable. It is then frozen and only the LoRA factors and the EEG branch
//! train, on EEG-conditioned batches.

use std::path::Path;

use neurimg_tensor::{read_unt1, write_unt1, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{CondInput, Mode};
use crate::error::{contract, CoreError, Result};
use crate::flow::{fm_loss, sample_sigma, train_step, AdamW, AdamWConfig, FlowItem, SigmaSchedule, StepOptions, StepReport};
use crate::model::{attn_targets, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Steps with the whole backbone trainable, text conditioning only.
    pub base_steps: usize,
    /// Steps with the backbone frozen, training adapters and the EEG branch.
    pub adapter_steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of each phase spent in linear warm-up.
    pub warmup_frac: f64,
    pub clip: f64,
    pub optimizer: AdamWConfig,
    /// Weight of the pull of neural `(T, g)` toward the prompt's stub features.
    pub align_weight: f64,
    pub sigma: SigmaSchedule,
    /// Modes cycled through the items of an adapter-phase batch.
    pub adapter_modes: Vec<Mode>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_steps: 1500,
            adapter_steps: 500,
            batch: 8,
            lr: 2e-3,
            warmup_frac: 0.05,
            clip: 1.0,
            optimizer: AdamWConfig::default(),
            align_weight: 1.0,
            sigma: SigmaSchedule::Uniform,
            adapter_modes: vec![Mode::Eeg, Mode::TextEeg],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.base_steps + self.adapter_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(contract("batch must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.warmup_frac) || !(self.clip > 0.0) {
            return Err(contract("lr must be finite and non-negative, warmup_frac in [0, 1], clip positive"));
        }
        if self.adapter_steps > 0 && (self.adapter_modes.is_empty() || self.adapter_modes.contains(&Mode::Text)) {
            return Err(contract("adapter_modes must list only eeg and text+eeg"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Base,
    Adapter,
}

/// One paired training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `H × W × ch` in `[0, 1]`.
    pub image: Tensor,
    pub prompt: String,
    /// Standardized `C × W` epoch.
    pub epoch: Tensor,
    pub label: usize,
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub config: TrainConfig,
    /// Completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(config.optimizer);
        Ok(Self {
            model,
            opt,
            config,
            step: 0,
        })
    }

    pub fn phase(&self, step: usize) -> Phase {
        if step < self.config.base_steps {
            Phase::Base
        } else {
            Phase::Adapter
        }
    }

    /// Learning rate at `step`, warming up linearly at the start of each
    /// phase.
    pub fn lr(&self, step: usize) -> f64 {
        let c = &self.config;
        let (k, len) = match self.phase(step) {
            Phase::Base => (step, c.base_steps),
            Phase::Adapter => (step - c.base_steps, c.adapter_steps),
        };
        let warm = ((c.warmup_frac * len as f64).round() as usize).max(1);
        c.lr * ((k + 1) as f64 / warm as f64).min(1.0)
    }

    /// The batch drawn at `step`; a pure function of the seed and the step.
    pub fn batch(&self, data: &[Example], step: usize) -> Result<Vec<FlowItem>> {
        if data.is_empty() {
            return Err(contract("no training examples"));
        }
        let mut rng = step_rng(self.config.seed, step as u64);
        let phase = self.phase(step);
        (0..self.config.batch)
            .map(|k| {
                let ex = &data[rng.random_range(0..data.len())];
                let mode = match phase {
                    Phase::Base => Mode::Text,
                    Phase::Adapter => self.config.adapter_modes[k % self.config.adapter_modes.len()],
                };
                flow_item(&self.model, ex, mode, &mut rng, self.config.sigma)
            })
            .collect()
    }

    /// Runs the next step.
    pub fn step(&mut self, data: &[Example]) -> Result<StepReport> {
        let step = self.step;
        match self.phase(step) {
            Phase::Base => self.model.set_backbone_trainable(),
            Phase::Adapter => {
                if step == self.config.base_steps {
                    self.opt = AdamW::new(self.config.optimizer);
                }
                self.model.set_trainable();
            }
        }
        let batch = self.batch(data, step)?;
        let options = StepOptions {
            clip: self.config.clip,
            align_weight: if self.phase(step) == Phase::Adapter { self.config.align_weight } else { 0.0 },
        };
        let lr = self.lr(step);
        let report = train_step(&mut self.model, &batch, &mut self.opt, lr, options).map_err(|e| match e {
            CoreError::Numeric(m) => CoreError::Numeric(format!("step {step}: {m}")),
            other => other,
        })?;
        self.step += 1;
        Ok(report)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.model.config)?)?;
        std::fs::write(dir.join("train.json"), serde_json::to_string_pretty(&self.config)?)?;
        std::fs::write(dir.join("step.txt"), format!("{}\n", self.step))?;
        save_model_tensors(&self.model, dir)?;
        self.opt.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: TrainConfig = serde_json::from_slice(&std::fs::read(dir.join("train.json"))?)?;
        let model = load_model(dir)?;
        let step = std::fs::read_to_string(dir.join("step.txt"))?
            .trim()
            .parse()
            .map_err(|_| CoreError::Parse("step.txt is not a step count".into()))?;
        let mut t = Self::new(model, config)?;
        t.opt = AdamW::load(dir)?;
        t.step = step;
        match t.phase(step) {
            Phase::Base => t.model.set_backbone_trainable(),
            Phase::Adapter => t.model.set_trainable(),
        }
        Ok(t)
    }
}

/// Independent stream per step, so a resumed run draws the same batches.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Places `ex` on the noise path with fresh noise and noise level.
pub fn flow_item<R: Rng + ?Sized>(model: &Model, ex: &Example, mode: Mode, rng: &mut R, schedule: SigmaSchedule) -> Result<FlowItem> {
    let z0 = model.encode_image(&ex.image)?;
    let eps = Tensor::randn(z0.shape(), 1.0, rng);
    let sigma = sample_sigma(rng, schedule);
    let cond = match mode {
        Mode::Text => CondInput::text(ex.prompt.clone()),
        Mode::Eeg => CondInput::eeg(ex.epoch.clone()),
        Mode::TextEeg => CondInput::text_eeg(ex.prompt.clone(), ex.epoch.clone()),
    };
    Ok(FlowItem {
        z0,
        eps,
        sigma,
        cond,
        align_to: mode.uses_eeg().then(|| ex.prompt.clone()),
    })
}

/// A fixed evaluation batch: each example once per mode, with noise and
/// noise levels drawn from `seed`.
pub fn eval_batch(model: &Model, data: &[Example], mode: Mode, seed: u64) -> Result<Vec<FlowItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    data.iter()
        .map(|ex| flow_item(model, ex, mode, &mut rng, SigmaSchedule::Uniform))
        .collect()
}

/// Flow-matching loss of `model` on [`eval_batch`].
pub fn eval_fm_loss(model: &Model, data: &[Example], mode: Mode, seed: u64) -> Result<f64> {
    fm_loss(model, &eval_batch(model, data, mode, seed)?)
}

fn save_model_tensors(model: &Model, dir: &Path) -> Result<()> {
    model.save_params(dir)?;
    write_unt1(dir.join("text.table.tokens.unt"), &model.text.tokens)?;
    write_unt1(dir.join("text.table.pooled.unt"), &model.text.pooled)?;
    Ok(())
}

/// Rebuilds a model from a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<Model> {
    let config: ModelConfig = serde_json::from_slice(&std::fs::read(dir.join("config.json"))?)?;
    let mut model = Model::new(config)?;
    model.params.load(dir, "")?;
    model.text.tokens = read_unt1(dir.join("text.table.tokens.unt"))?;
    model.text.pooled = read_unt1(dir.join("text.table.pooled.unt"))?;
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join(format!("lora.{}.json", attn_targets(0)[0])))?)?;
    model.lora_enabled = meta["enabled"].as_bool().unwrap_or(true);
    Ok(model)
}
