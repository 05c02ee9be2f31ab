//! The toy diffusion transformer: patch tokens, conditioning tokens, stacked
//! mutual-mask attention blocks with adaptive scale/shift, and a velocity
//! readout for the target block.

use std::path::Path;

use neurimg_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention, build_mutual_mask, AttnVars, LoraAdapter, MaskMode};
use crate::conditioning::{assemble_var, decoder_var, linear, project_var, text_var};
use crate::conditioning::{CondInput, CondVars, ConditionSet, Fusion, Mode, TextStub};
use crate::error::{contract, dim_err, Result};
use crate::params::{Binder, ParamStore};
use crate::tokens::{extract_patches, grid_positions, unpatchify, AxisSplit, BlockKind, EegLayout, Layout, Position};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mask_mode: MaskMode,
    /// Rotary split of each head; `None` uses `(d/4, 3d/8, 3d/8)`.
    pub axis_split: Option<AxisSplit>,
    pub rope_base: f64,
    pub rotate_text: bool,
    pub eeg_layout: EegLayout,
    /// Sinusoidal width of the noise-level embedding.
    pub time_dim: usize,
    /// `M`, text tokens per prompt.
    pub text_len: usize,
    /// `d`, text token width.
    pub d_text: usize,
    /// `d_g`, pooled text width.
    pub d_pooled: usize,
    pub vocab: usize,
    pub eeg_channels: usize,
    pub conv_widths: Vec<usize>,
    pub conv_kernel: usize,
    /// `L_e`, EEG tokens in the sequence.
    pub eeg_tokens: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub fusion: Fusion,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch: 2,
            depth: 4,
            d_model: 64,
            heads: 4,
            mlp_ratio: 4,
            mask_mode: MaskMode::Hub,
            axis_split: None,
            rope_base: 10_000.0,
            rotate_text: false,
            eeg_layout: EegLayout::Line,
            time_dim: 64,
            text_len: 8,
            d_text: 64,
            d_pooled: 32,
            vocab: 4096,
            eeg_channels: 8,
            conv_widths: vec![32, 64, 128],
            conv_kernel: 5,
            eeg_tokens: 4,
            lora_rank: 8,
            lora_alpha: 16.0,
            fusion: Fusion::Augment,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn d_neural(&self) -> usize {
        *self.conv_widths.last().unwrap_or(&0)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch.max(1)
    }

    pub fn split(&self) -> Result<AxisSplit> {
        match self.axis_split {
            Some(s) => {
                s.validate(self.head_dim())?;
                Ok(s)
            }
            None => AxisSplit::default_for(self.head_dim()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch", self.patch),
            ("depth", self.depth),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("time_dim", self.time_dim),
            ("text_len", self.text_len),
            ("d_text", self.d_text),
            ("d_pooled", self.d_pooled),
            ("vocab", self.vocab),
            ("eeg_channels", self.eeg_channels),
            ("conv_kernel", self.conv_kernel),
            ("eeg_tokens", self.eeg_tokens),
            ("lora_rank", self.lora_rank),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(contract(format!("{name} must be positive")));
        }
        if self.image_size % self.patch != 0 {
            return Err(dim_err(format!("patch {} does not divide {}", self.patch, self.image_size)));
        }
        if self.d_model % self.heads != 0 {
            return Err(dim_err(format!("{} heads do not divide d_model {}", self.heads, self.d_model)));
        }
        if self.time_dim % 2 != 0 {
            return Err(dim_err("time embedding width must be even"));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(contract("conv_widths must be non-empty and positive"));
        }
        if self.lora_rank > self.d_model {
            return Err(dim_err(format!("LoRA rank {} exceeds d_model {}", self.lora_rank, self.d_model)));
        }
        self.split()?;
        Ok(())
    }
}

/// Names of the four adapted projections in block `i`.
pub fn attn_targets(i: usize) -> [String; 4] {
    ["wq", "wk", "wv", "wo"].map(|w| format!("blocks.{i}.attn.{w}"))
}

/// Parameters that stay trainable once the backbone is frozen.
pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with("lora.") || name.starts_with("neural.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub text: TextStub,
    /// Apply the EEG adapters in EEG modes; off restores the base denoiser.
    pub lora_enabled: bool,
}

/// Sinusoidal embedding of `σ·1000`, `[cos | sin]` halves.
pub fn sigma_embedding(sigma: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let t = sigma * 1000.0;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).cos();
        out[half + i] = (t * freq).sin();
    }
    Tensor::new(&[1, dim], out).expect("positive width")
}

/// Adds `<name>.w` (`d_in × d_out`) and a zero `<name>.b`. `std` of `None`
/// means `1/sqrt(d_in)`.
fn dense(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize, std: Option<f64>) {
    let w = match std {
        Some(s) if s == 0.0 => Tensor::zeros(&[d_in, d_out]),
        Some(s) => Tensor::randn(&[d_in, d_out], s, rng),
        None => Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
    };
    p.insert(format!("{name}.w"), w, true);
    p.insert(format!("{name}.b"), Tensor::zeros(&[d_out]), true);
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut p = ParamStore::new();
        let (d, f) = (c.d_model, c.d_model * c.mlp_ratio);
        dense(&mut p, &mut rng, "embed", c.patch_dim(), d, None);
        dense(&mut p, &mut rng, "text", c.d_text, d, None);
        dense(&mut p, &mut rng, "cond.t1", c.time_dim, d, None);
        dense(&mut p, &mut rng, "cond.t2", d, d, None);
        dense(&mut p, &mut rng, "cond.g", c.d_pooled, d, None);
        for i in 0..c.depth {
            for name in attn_targets(i) {
                let w = Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng);
                p.insert(name, w, true);
            }
            dense(&mut p, &mut rng, &format!("blocks.{i}.mod"), d, 4 * d, Some(0.0));
            dense(&mut p, &mut rng, &format!("blocks.{i}.mlp1"), d, f, None);
            dense(&mut p, &mut rng, &format!("blocks.{i}.mlp2"), f, d, None);
        }
        dense(&mut p, &mut rng, "final.mod", d, 2 * d, Some(0.0));
        dense(&mut p, &mut rng, "final.out", d, c.patch_dim(), Some(0.0));

        let mut text_rng = ChaCha8Rng::seed_from_u64(c.seed);
        text_rng.set_stream(1);
        p.insert("text.pad", Tensor::randn(&[1, c.d_text], 1.0, &mut text_rng), true);

        // Adapters and the neural branch draw from their own stream so the
        // backbone initialization does not depend on their sizes.
        let mut nrng = ChaCha8Rng::seed_from_u64(c.seed);
        nrng.set_stream(2);
        for i in 0..c.depth {
            for target in attn_targets(i) {
                let ad = LoraAdapter::init(target.clone(), d, d, c.lora_rank, c.lora_alpha, &mut nrng)?;
                p.insert(format!("lora.{target}.A"), ad.a, false);
                p.insert(format!("lora.{target}.B"), ad.b, false);
            }
        }
        let mut width = c.eeg_channels;
        for (l, &w) in c.conv_widths.iter().enumerate() {
            dense(&mut p, &mut nrng, &format!("neural.conv{l}"), c.conv_kernel * width, w, None);
            width = w;
        }
        dense(&mut p, &mut nrng, "neural.proj_t", width, c.text_len * c.d_text, None);
        dense(&mut p, &mut nrng, "neural.proj_v", width, c.d_pooled, None);
        dense(&mut p, &mut nrng, "neural.tokens", width, c.eeg_tokens * d, None);

        p.set_trainable_where(|n| !is_adapter_param(n));
        let text = TextStub::new(c.vocab, c.d_text, c.d_pooled, c.seed);
        Ok(Self {
            config,
            params: p,
            text,
            lora_enabled: true,
        })
    }

    /// Trains the whole backbone; adapters and the neural branch stay fixed.
    pub fn set_backbone_trainable(&mut self) {
        self.params.set_trainable_where(|n| !is_adapter_param(n));
    }

    /// Freezes every backbone weight; only LoRA factors and the neural
    /// decoder/adapter parameters remain trainable.
    pub fn set_trainable(&mut self) {
        self.params.set_trainable_where(is_adapter_param);
    }

    /// The stored adapter for one projection, e.g. `blocks.0.attn.wq`.
    pub fn adapter(&self, target: &str) -> Result<LoraAdapter> {
        LoraAdapter::new(
            target,
            self.params.get(&format!("lora.{target}.A"))?.clone(),
            self.params.get(&format!("lora.{target}.B"))?.clone(),
            self.config.lora_alpha,
        )
    }

    /// Whether the EEG adapters are applied for `mode`.
    pub fn adapters_on(&self, mode: Mode) -> bool {
        self.lora_enabled && mode.uses_eeg()
    }

    /// Packing layout for this model with `n_ctx` context images and an
    /// optional EEG block.
    pub fn layout(&self, n_ctx: usize, eeg: bool) -> Result<Layout> {
        let c = &self.config;
        let g = c.grid();
        let mut blocks: Vec<crate::tokens::TokenBlock> = Vec::new();
        let placeholder = |kind, positions: Vec<Position>| crate::tokens::TokenBlock {
            kind,
            tokens: Tensor::zeros(&[positions.len(), 1]),
            positions,
        };
        blocks.push(placeholder(BlockKind::Target, grid_positions(0, g, g)));
        for i in 0..n_ctx {
            blocks.push(placeholder(BlockKind::Context(i + 1), grid_positions(0, g, g)));
        }
        if eeg {
            blocks.push(placeholder(BlockKind::Eeg, vec![[0, 0, 0]; c.eeg_tokens]));
        }
        let blocks = crate::tokens::assign_block_positions(blocks, c.eeg_layout)?;
        let specs: Vec<(BlockKind, &[Position])> = blocks.iter().map(|b| (b.kind, b.positions.as_slice())).collect();
        Ok(Layout::new(&specs, c.text_len, c.rotate_text))
    }

    fn broadcast(tape: &mut Tape, v: Var, rows: usize) -> Result<Var> {
        let ones = tape.constant(Tensor::ones(&[rows, 1]));
        Ok(tape.matmul(ones, v)?)
    }

    /// `x + x ⊙ scale + shift` with `1 × d` scale and shift rows.
    fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let rows = tape.shape(x)[0];
        let d = tape.shape(x)[1];
        let sc = Self::broadcast(tape, scale, rows)?;
        let xs = tape.mul(x, sc)?;
        let y = tape.add(x, xs)?;
        let shift = tape.reshape(shift, &[d])?;
        Ok(tape.add_bias(y, shift)?)
    }

    /// Velocity for latent tokens `z` (`N × p²·ch`) at noise level `sigma`.
    pub fn velocity_var(&self, tape: &mut Tape, b: &mut Binder, z: Var, sigma: f64, cond: &CondVars) -> Result<Var> {
        let c = &self.config;
        let n = c.grid() * c.grid();
        if tape.shape(z) != [n, c.patch_dim()] {
            return Err(dim_err(format!("latent tokens {:?}, expected [{n}, {}]", tape.shape(z), c.patch_dim())));
        }
        if tape.shape(cond.t) != [c.text_len, c.d_text] || tape.shape(cond.g) != [1, c.d_pooled] {
            return Err(dim_err(format!(
                "text features {:?} / pooled {:?} do not match the model",
                tape.shape(cond.t),
                tape.shape(cond.g)
            )));
        }
        let lora_on = self.adapters_on(cond.mode);
        let layout = self.layout(cond.contexts.len(), cond.z_e.is_some())?;
        let mask = build_mutual_mask(&layout.block_sets(), c.mask_mode)?;
        let mask = tape.constant(mask.to_tensor());
        let rope = layout.rope(c.split()?, c.rope_base);

        let mut parts = vec![linear(tape, b, z, "embed")?];
        for &ctx in &cond.contexts {
            parts.push(linear(tape, b, ctx, "embed")?);
        }
        if let Some(ze) = cond.z_e {
            parts.push(ze);
        }
        parts.push(linear(tape, b, cond.t, "text")?);
        let mut h = tape.concat(&parts, 0)?;
        let rows = tape.shape(h)[0];

        let temb = tape.constant(sigma_embedding(sigma, c.time_dim));
        let t1 = linear(tape, b, temb, "cond.t1")?;
        let t1 = tape.gelu(t1);
        let t2 = linear(tape, b, t1, "cond.t2")?;
        let gv = linear(tape, b, cond.g, "cond.g")?;
        let cvec = tape.add(t2, gv)?;
        let cact = tape.gelu(cvec);

        let d = c.d_model;
        for i in 0..c.depth {
            let m = linear(tape, b, cact, &format!("blocks.{i}.mod"))?;
            let chunk = |tape: &mut Tape, k: usize| tape.slice(m, 1, k * d, (k + 1) * d);
            let (sh1, sc1, sh2, sc2) = (chunk(tape, 0)?, chunk(tape, 1)?, chunk(tape, 2)?, chunk(tape, 3)?);

            let a = tape.layer_norm(h, LN_EPS)?;
            let a = Self::modulate(tape, a, sh1, sc1)?;
            let names = attn_targets(i);
            let mut w = Vec::with_capacity(4);
            let mut lora = [None; 4];
            for (k, name) in names.iter().enumerate() {
                w.push(b.var(tape, name)?);
                if lora_on {
                    let la = b.var(tape, &format!("lora.{name}.A"))?;
                    let lb = b.var(tape, &format!("lora.{name}.B"))?;
                    lora[k] = Some((la, lb, c.lora_alpha / c.lora_rank as f64));
                }
            }
            let vars = AttnVars {
                wq: w[0],
                wk: w[1],
                wv: w[2],
                wo: w[3],
                lora,
            };
            let att = attention(tape, a, &vars, c.heads, mask, &rope)?;
            h = tape.add(h, att)?;

            let m2 = tape.layer_norm(h, LN_EPS)?;
            let m2 = Self::modulate(tape, m2, sh2, sc2)?;
            let u = linear(tape, b, m2, &format!("blocks.{i}.mlp1"))?;
            let u = tape.gelu(u);
            let u = linear(tape, b, u, &format!("blocks.{i}.mlp2"))?;
            h = tape.add(h, u)?;
        }
        debug_assert_eq!(tape.shape(h)[0], rows);

        let fm = linear(tape, b, cact, "final.mod")?;
        let sh = tape.slice(fm, 1, 0, d)?;
        let sc = tape.slice(fm, 1, d, 2 * d)?;
        let x = tape.slice(h, 0, 0, n)?;
        let x = tape.layer_norm(x, LN_EPS)?;
        let x = Self::modulate(tape, x, sh, sc)?;
        linear(tape, b, x, "final.out")
    }

    /// Condition values for `input`, computed without gradients.
    pub fn assemble(&self, input: &CondInput) -> Result<ConditionSet> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let cv = assemble_var(&mut tape, &mut b, self, input)?;
        Ok(cv.values(&tape))
    }

    /// Velocity tokens for fixed condition values.
    pub fn velocity(&self, z: &Tensor, sigma: f64, cond: &ConditionSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let zv = tape.constant(z.clone());
        let cv = CondVars::constant(&mut tape, cond);
        let v = self.velocity_var(&mut tape, &mut b, zv, sigma, &cv)?;
        Ok(tape.value(v).clone())
    }

    /// Stub text features for a prompt.
    pub fn encode_text_stub(&self, prompt: &str) -> Result<(Tensor, Tensor)> {
        let pad = self.params.get("text.pad")?;
        self.text.encode(prompt, self.config.text_len, pad)
    }

    /// Neural feature `f` (`1 × d_f`) of a standardized epoch.
    pub fn neural_decoder(&self, epoch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let f = decoder_var(&mut tape, &mut b, &self.config, epoch)?;
        Ok(tape.value(f).clone())
    }

    /// `(T_sub, g_sub)` for a neural feature.
    pub fn adapter_project(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = &self.config;
        if f.len() != c.d_neural() {
            return Err(dim_err(format!("feature of {} for d_f {}", f.len(), c.d_neural())));
        }
        let mut tape = Tape::new();
        let mut b = Binder::new(&self.params, false);
        let fv = tape.constant(f.reshape(&[1, c.d_neural()])?);
        let (t, g) = project_var(&mut tape, &mut b, c, fv)?;
        Ok((tape.value(t).clone(), tape.value(g).clone()))
    }

    /// Stub `(T, g)` as tape variables, with the pad row bound through `b`.
    pub fn text_vars(&self, tape: &mut Tape, b: &mut Binder, prompt: &str) -> Result<(Var, Var)> {
        text_var(tape, b, self, prompt)
    }

    pub fn assemble_vars(&self, tape: &mut Tape, b: &mut Binder, input: &CondInput) -> Result<CondVars> {
        assemble_var(tape, b, self, input)
    }

    /// Image (`H × W × ch`, `[0, 1]`) to latent tokens in `[-1, 1]`.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        extract_patches(&image.map(|v| 2.0 * v - 1.0), self.config.patch)
    }

    /// Latent tokens back to an image, clamped to `[0, 1]`.
    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let img = unpatchify(z, c.patch, c.image_size, c.image_size, c.channels)?;
        Ok(img.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)))
    }

    /// Adapter metadata and all tensors, named after the parameters.
    pub fn save_params(&self, dir: &Path) -> Result<()> {
        self.params.save(dir, "")?;
        for i in 0..self.config.depth {
            for target in attn_targets(i) {
                let meta = serde_json::json!({
                    "rank": self.config.lora_rank,
                    "alpha": self.config.lora_alpha,
                    "enabled": self.lora_enabled,
                });
                std::fs::write(dir.join(format!("lora.{target}.json")), serde_json::to_string_pretty(&meta)?)?;
            }
        }
        Ok(())
    }
}
