//! The condition set fed to the denoiser: hashed text-encoder stubs, the EEG
//! decoder and the projections that let EEG features stand in for text.

use std::fmt;
use std::str::FromStr;

use neurimg_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, CoreError, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Binder;
use crate::tokens::extract_patches;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Table row for a token: the low and high 32-bit halves of its FNV-1a 64
/// hash are XOR-folded, then reduced modulo the table size.
pub fn table_index(text: &str, rows: usize) -> usize {
    let h = fnv1a64(text.as_bytes());
    ((h as u32) ^ ((h >> 32) as u32)) as usize % rows
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "eeg")]
    Eeg,
    #[serde(rename = "text+eeg")]
    TextEeg,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Text, Mode::Eeg, Mode::TextEeg];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Text => "text",
            Mode::Eeg => "eeg",
            Mode::TextEeg => "text+eeg",
        }
    }

    pub fn uses_eeg(self) -> bool {
        self != Mode::Text
    }

    pub fn uses_prompt(self) -> bool {
        self != Mode::Eeg
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CoreError::Parse(format!("mode `{s}` is not text, eeg or text+eeg")))
    }
}

/// How text and EEG combine in `text+eeg` mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Keep the prompt's text features and add the EEG token block.
    #[default]
    Augment,
    /// Replace the text features by their EEG projections, as in `eeg` mode.
    Substitute,
}

/// Fixed Gaussian lookup tables standing in for the token-level and pooled
/// text encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct TextStub {
    pub tokens: Tensor,
    pub pooled: Tensor,
}

impl TextStub {
    pub fn new(rows: usize, d: usize, d_g: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x7e57);
        let tokens = Tensor::randn(&[rows, d], 1.0, &mut rng);
        let pooled = Tensor::randn(&[rows, d_g], 1.0, &mut rng);
        Self { tokens, pooled }
    }

    /// Table rows of the first `m` whitespace tokens.
    pub fn token_rows(&self, prompt: &str, m: usize) -> Vec<usize> {
        let rows = self.tokens.rows();
        prompt.split_whitespace().take(m).map(|t| table_index(t, rows)).collect()
    }

    /// `(T, g)`: `T` is `m × d` with the token rows followed by copies of
    /// `pad`; `g` is the pooled row of the whole prompt.
    pub fn encode(&self, prompt: &str, m: usize, pad: &Tensor) -> Result<(Tensor, Tensor)> {
        if m == 0 {
            return Err(contract("text length M must be at least 1"));
        }
        let d = self.tokens.cols();
        if pad.len() != d {
            return Err(dim_err(format!("pad row of {} for width {d}", pad.len())));
        }
        let mut data = Vec::with_capacity(m * d);
        for r in self.token_rows(prompt, m) {
            data.extend_from_slice(self.tokens.row(r));
        }
        while data.len() < m * d {
            data.extend_from_slice(pad.data());
        }
        let g = self.pooled.row(table_index(prompt, self.pooled.rows())).to_vec();
        Ok((Tensor::new(&[m, d], data)?, Tensor::new(&[1, g.len()], g)?))
    }
}

/// Inputs for one conditioned generation.
#[derive(Clone, Debug, PartialEq)]
pub struct CondInput {
    pub mode: Mode,
    pub prompt: Option<String>,
    /// Standardized `C × W` EEG epoch.
    pub epoch: Option<Tensor>,
    /// Context images, `H × W × ch` in `[0, 1]`.
    pub contexts: Vec<Tensor>,
}

impl CondInput {
    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            mode: Mode::Text,
            prompt: Some(prompt.into()),
            epoch: None,
            contexts: Vec::new(),
        }
    }

    pub fn eeg(epoch: Tensor) -> Self {
        Self {
            mode: Mode::Eeg,
            prompt: None,
            epoch: Some(epoch),
            contexts: Vec::new(),
        }
    }

    pub fn text_eeg(prompt: impl Into<String>, epoch: Tensor) -> Self {
        Self {
            mode: Mode::TextEeg,
            prompt: Some(prompt.into()),
            epoch: Some(epoch),
            contexts: Vec::new(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.mode.uses_prompt() && self.prompt.is_none() {
            return Err(contract(format!("mode {} needs a prompt", self.mode)));
        }
        if self.mode.uses_eeg() && self.epoch.is_none() {
            return Err(contract(format!("mode {} needs an EEG epoch", self.mode)));
        }
        Ok(())
    }
}

/// Concrete condition values `{T, g, Z_y, Z_e}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub mode: Mode,
    /// `M × d` token-level text features.
    pub t: Tensor,
    /// `1 × d_g` pooled vector.
    pub g: Tensor,
    /// Raw patches of each context image.
    pub contexts: Vec<Tensor>,
    /// `L_e × d_model` EEG tokens.
    pub z_e: Option<Tensor>,
}

/// A condition set living on a tape.
#[derive(Clone, Debug)]
pub struct CondVars {
    pub mode: Mode,
    pub t: Var,
    pub g: Var,
    pub contexts: Vec<Var>,
    pub z_e: Option<Var>,
    /// Neural `(T_sub, g_sub)`, when the epoch was decoded.
    pub neural: Option<(Var, Var)>,
}

impl CondVars {
    /// Places fixed condition values on `tape`.
    pub fn constant(tape: &mut Tape, c: &ConditionSet) -> Self {
        Self {
            mode: c.mode,
            t: tape.constant(c.t.clone()),
            g: tape.constant(c.g.clone()),
            contexts: c.contexts.iter().map(|x| tape.constant(x.clone())).collect(),
            z_e: c.z_e.as_ref().map(|z| tape.constant(z.clone())),
            neural: None,
        }
    }

    pub fn values(&self, tape: &Tape) -> ConditionSet {
        ConditionSet {
            mode: self.mode,
            t: tape.value(self.t).clone(),
            g: tape.value(self.g).clone(),
            contexts: self.contexts.iter().map(|&v| tape.value(v).clone()).collect(),
            z_e: self.z_e.map(|v| tape.value(v).clone()),
        }
    }
}

pub(crate) fn linear(tape: &mut Tape, b: &mut Binder, x: Var, name: &str) -> Result<Var> {
    let w = b.var(tape, &format!("{name}.w"))?;
    let bias = b.var(tape, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_bias(y, bias)?)
}

/// Strided temporal convolutions with GELU, then a mean over time.
pub(crate) fn decoder_var(tape: &mut Tape, b: &mut Binder, cfg: &ModelConfig, epoch: &Tensor) -> Result<Var> {
    if epoch.rank() != 2 || epoch.rows() != cfg.eeg_channels {
        return Err(dim_err(format!(
            "epoch {:?} does not have the configured {} channels",
            epoch.shape(),
            cfg.eeg_channels
        )));
    }
    if epoch.cols() < 8 {
        return Err(dim_err(format!("epoch of {} samples is shorter than 8", epoch.cols())));
    }
    let mut x = tape.constant(epoch.transpose()?);
    let k = cfg.conv_kernel;
    for l in 0..cfg.conv_widths.len() {
        let u = tape.unfold1d(x, k, 2, k / 2)?;
        let y = linear(tape, b, u, &format!("neural.conv{l}"))?;
        x = tape.gelu(y);
    }
    let t = tape.shape(x)[0];
    let pool = tape.constant(Tensor::full(&[1, t], 1.0 / t as f64));
    Ok(tape.matmul(pool, x)?)
}

/// `g_sub = Proj_v(f)`, `T_sub = reshape(Proj_t(f), M × d)`.
pub(crate) fn project_var(tape: &mut Tape, b: &mut Binder, cfg: &ModelConfig, f: Var) -> Result<(Var, Var)> {
    let t = linear(tape, b, f, "neural.proj_t")?;
    let t = tape.reshape(t, &[cfg.text_len, cfg.d_text])?;
    let g = linear(tape, b, f, "neural.proj_v")?;
    Ok((t, g))
}

/// One neural feature linearly expanded to `L_e` tokens of width `d_model`.
pub(crate) fn eeg_tokens_var(tape: &mut Tape, b: &mut Binder, cfg: &ModelConfig, f: Var) -> Result<Var> {
    let z = linear(tape, b, f, "neural.tokens")?;
    Ok(tape.reshape(z, &[cfg.eeg_tokens, cfg.d_model])?)
}

/// Stub `(T, g)` on the tape, with the learned pad row filling unused slots.
pub(crate) fn text_var(tape: &mut Tape, b: &mut Binder, model: &Model, prompt: &str) -> Result<(Var, Var)> {
    let cfg = &model.config;
    let rows = model.text.token_rows(prompt, cfg.text_len);
    let pad = b.var(tape, "text.pad")?;
    let n_pad = cfg.text_len - rows.len();
    let mut parts = Vec::with_capacity(2);
    if !rows.is_empty() {
        let mut data = Vec::with_capacity(rows.len() * cfg.d_text);
        for &r in &rows {
            data.extend_from_slice(model.text.tokens.row(r));
        }
        parts.push(tape.constant(Tensor::new(&[rows.len(), cfg.d_text], data)?));
    }
    if n_pad > 0 {
        let ones = tape.constant(Tensor::ones(&[n_pad, 1]));
        parts.push(tape.matmul(ones, pad)?);
    }
    let t = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
    let g = model.text.pooled.row(table_index(prompt, model.text.pooled.rows())).to_vec();
    let g = tape.constant(Tensor::new(&[1, g.len()], g)?);
    Ok((t, g))
}

/// Builds the condition set for `input` on `tape`.
pub(crate) fn assemble_var(tape: &mut Tape, b: &mut Binder, model: &Model, input: &CondInput) -> Result<CondVars> {
    input.check()?;
    let cfg = &model.config;
    let contexts = input
        .contexts
        .iter()
        .map(|img| Ok(tape.constant(extract_patches(&img.map(|v| 2.0 * v - 1.0), cfg.patch)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut neural = None;
    let mut z_e = None;
    if let (true, Some(epoch)) = (input.mode.uses_eeg(), &input.epoch) {
        let f = decoder_var(tape, b, cfg, epoch)?;
        neural = Some(project_var(tape, b, cfg, f)?);
        z_e = Some(eeg_tokens_var(tape, b, cfg, f)?);
    }
    let substitute = match input.mode {
        Mode::Text => false,
        Mode::Eeg => true,
        Mode::TextEeg => cfg.fusion == Fusion::Substitute,
    };
    let (t, g) = match (substitute, neural) {
        (true, Some(pair)) => pair,
        _ => text_var(tape, b, model, input.prompt.as_deref().unwrap_or(""))?,
    };
    Ok(CondVars {
        mode: input.mode,
        t,
        g,
        contexts,
        z_e,
        neural,
    })
}
