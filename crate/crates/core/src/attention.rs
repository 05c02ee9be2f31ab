//! Blockwise mutual attention mask, multi-head attention over a packed
//! sequence, and low-rank adapters on the projection weights.

use std::path::Path;
use std::sync::Arc;

use neurimg_tensor::{read_unt1, write_unt1, RotaryTable, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, CoreError, Result};
use crate::tokens::{BlockKind, Position};
use crate::tokens::{rope_table, AxisSplit, ROPE_BASE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Text rows see everything; every other row sees only its own block.
    Literal,
    /// Literal, plus every row also sees the text columns.
    #[default]
    Hub,
}

impl std::str::FromStr for MaskMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(MaskMode::Literal),
            "hub" => Ok(MaskMode::Hub),
            _ => Err(CoreError::Parse(format!("mask mode `{s}` is not literal or hub"))),
        }
    }
}

/// `L×L` allow/block pattern; blocked entries become `-inf` scores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MutualMask {
    len: usize,
    allowed: Vec<bool>,
}

impl MutualMask {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.len + j]
    }

    /// Additive score mask over `{0, -inf}`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::new(&[self.len, self.len], data).expect("mask is square")
    }

    /// One line per row, `.` allowed and `#` blocked.
    pub fn dump(&self) -> String {
        let mut s = String::with_capacity(self.len * (self.len + 1));
        for row in self.allowed.chunks(self.len) {
            s.extend(row.iter().map(|&a| if a { '.' } else { '#' }));
            s.push('\n');
        }
        s
    }
}

pub fn build_mutual_mask(block_sets: &[(BlockKind, Vec<usize>)], mode: MaskMode) -> Result<MutualMask> {
    let len: usize = block_sets.iter().map(|(_, s)| s.len()).sum();
    let mut owner = vec![usize::MAX; len];
    for (b, (_, set)) in block_sets.iter().enumerate() {
        for &i in set {
            if i >= len {
                return Err(contract(format!("index {i} outside a sequence of {len}")));
            }
            if owner[i] != usize::MAX {
                return Err(contract(format!("index {i} belongs to two blocks")));
            }
            owner[i] = b;
        }
    }
    let is_text: Vec<bool> = owner.iter().map(|&b| block_sets[b].0 == BlockKind::Text).collect();
    let mut allowed = vec![false; len * len];
    for i in 0..len {
        for j in 0..len {
            allowed[i * len + j] =
                owner[i] == owner[j] || is_text[i] || (mode == MaskMode::Hub && is_text[j]);
        }
    }
    Ok(MutualMask { len, allowed })
}

/// Low-rank update `(alpha / r)·A·B` on a frozen `d_in × d_out` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
    pub enabled: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct LoraMeta {
    rank: usize,
    alpha: f64,
    enabled: bool,
}

impl LoraAdapter {
    pub fn new(target: impl Into<String>, a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let adapter = Self {
            target: target.into(),
            a,
            b,
            alpha,
            enabled: true,
        };
        adapter.check(None)?;
        Ok(adapter)
    }

    /// `A ~ N(0, 0.02²)`, `B = 0`: the update starts at exactly zero.
    pub fn init<R: Rng + ?Sized>(target: impl Into<String>, d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(dim_err("LoRA rank must be positive"));
        }
        let a = Tensor::randn(&[d_in, rank], 0.02, rng);
        Self::new(target, a, Tensor::zeros(&[rank, d_out]), alpha)
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    fn check(&self, w0: Option<&Tensor>) -> Result<()> {
        let r = self.a.cols();
        if self.a.rank() != 2 || self.b.rank() != 2 || self.b.rows() != r {
            return Err(dim_err(format!("LoRA rank mismatch: A {:?}, B {:?}", self.a.shape(), self.b.shape())));
        }
        if r > self.a.rows().min(self.b.cols()) {
            return Err(dim_err(format!("LoRA rank {r} exceeds min(d_in, d_out)")));
        }
        if let Some(w) = w0 {
            if w.shape() != [self.a.rows(), self.b.cols()] {
                return Err(dim_err(format!(
                    "adapter {}×{} does not fit weight {:?}",
                    self.a.rows(),
                    self.b.cols(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    /// `lora.<target>.A/.B` tensors plus `lora.<target>.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_unt1(dir.join(format!("lora.{}.A.unt", self.target)), &self.a)?;
        write_unt1(dir.join(format!("lora.{}.B.unt", self.target)), &self.b)?;
        let meta = LoraMeta {
            rank: self.rank(),
            alpha: self.alpha,
            enabled: self.enabled,
        };
        std::fs::write(dir.join(format!("lora.{}.json", self.target)), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, target: &str) -> Result<Self> {
        let meta: LoraMeta = serde_json::from_slice(&std::fs::read(dir.join(format!("lora.{target}.json")))?)?;
        let a = read_unt1(dir.join(format!("lora.{target}.A.unt")))?;
        let b = read_unt1(dir.join(format!("lora.{target}.B.unt")))?;
        let mut adapter = Self::new(target, a, b, meta.alpha)?;
        if adapter.rank() != meta.rank {
            return Err(contract(format!("stored rank {} but A has {}", meta.rank, adapter.rank())));
        }
        adapter.enabled = meta.enabled;
        Ok(adapter)
    }
}

/// `x·W0 + (alpha/r)·(x·A)·B`, or `x·W0` when the adapter is disabled.
pub fn lora_forward(x: &Tensor, w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check(Some(w0))?;
    let base = x.matmul(w0)?;
    if !adapter.enabled {
        return Ok(base);
    }
    let delta = x.matmul(&adapter.a)?.matmul(&adapter.b)?.scale(adapter.scale());
    Ok(base.add(&delta)?)
}

/// `W0 + (alpha/r)·A·B`. Merging is additive, so merging twice applies the
/// update twice.
pub fn lora_merge(w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check(Some(w0))?;
    Ok(w0.add(&adapter.a.matmul(&adapter.b)?.scale(adapter.scale()))?)
}

/// Tape form of [`lora_forward`]; `lora` is `(A, B, alpha/r)`.
pub fn lora_var(tape: &mut Tape, x: Var, w0: Var, lora: Option<(Var, Var, f64)>) -> Result<Var> {
    let base = tape.matmul(x, w0)?;
    match lora {
        None => Ok(base),
        Some((a, b, s)) => {
            let xa = tape.matmul(x, a)?;
            let xab = tape.matmul(xa, b)?;
            let up = tape.scale(xab, s);
            Ok(tape.add(base, up)?)
        }
    }
}

/// Projection weights of one attention layer, bound to a tape.
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    /// Adapters for `[q, k, v, o]` when enabled.
    pub lora: [Option<(Var, Var, f64)>; 4],
}

/// Multi-head attention over `s` (`L × d_model`). Heads take consecutive
/// `d_k`-wide column slices of the projections; queries and keys are rotated
/// by `rope`; `mask` is added to the scaled scores.
pub fn attention(tape: &mut Tape, s: Var, w: &AttnVars, heads: usize, mask: Var, rope: &Arc<RotaryTable>) -> Result<Var> {
    let q = lora_var(tape, s, w.wq, w.lora[0])?;
    let k = lora_var(tape, s, w.wk, w.lora[1])?;
    let v = lora_var(tape, s, w.wv, w.lora[2])?;
    let dq = tape.shape(q)[1];
    let dv = tape.shape(v)[1];
    if heads == 0 || dq % heads != 0 || dv % heads != 0 || tape.shape(k)[1] != dq {
        return Err(dim_err(format!("{heads} heads over query width {dq}, value width {dv}")));
    }
    let (dk, dh) = (dq / heads, dv / heads);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * dk, (h + 1) * dk)?;
        let kh = tape.slice(k, 1, h * dk, (h + 1) * dk)?;
        let vh = tape.slice(v, 1, h * dh, (h + 1) * dh)?;
        let qh = tape.rotary(qh, rope.clone())?;
        let kh = tape.rotary(kh, rope.clone())?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, mask)?;
        let p = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(p, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    lora_var(tape, o, w.wo, w.lora[3])
}

/// Dense weights of one attention layer with optional adapters.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
    pub lora: [Option<LoraAdapter>; 4],
}

impl AttentionParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: usize) -> Result<Self> {
        if wo.rows() != wv.cols() || wq.shape() != wk.shape() || wq.rows() != wv.rows() || wo.cols() != wq.rows() {
            return Err(dim_err(format!(
                "attention weights q {:?} k {:?} v {:?} o {:?}",
                wq.shape(),
                wk.shape(),
                wv.shape(),
                wo.shape()
            )));
        }
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
            lora: [None, None, None, None],
        })
    }
}

/// Stand-alone attention layer on plain tensors; `split` partitions the head
/// width across the rotary axes.
pub fn masked_attention(
    s: &Tensor,
    params: &AttentionParams,
    mask: &MutualMask,
    positions: &[Position],
    split: AxisSplit,
) -> Result<Tensor> {
    let l = s.rows();
    if mask.len() != l || positions.len() != l {
        return Err(dim_err(format!("mask {} and {} positions for {l} tokens", mask.len(), positions.len())));
    }
    split.validate(params.wq.cols() / params.heads.max(1))?;
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let m = tape.constant(mask.to_tensor());
    let mut bind = |t: &Tensor| tape.constant(t.clone());
    let (wq, wk, wv, wo) = (bind(&params.wq), bind(&params.wk), bind(&params.wv), bind(&params.wo));
    let mut lora = [None; 4];
    for (slot, adapter) in lora.iter_mut().zip(&params.lora) {
        if let Some(ad) = adapter.as_ref().filter(|a| a.enabled) {
            *slot = Some((tape.constant(ad.a.clone()), tape.constant(ad.b.clone()), ad.scale()));
        }
    }
    let w = AttnVars { wq, wk, wv, wo, lora };
    let rope = Arc::new(rope_table(positions, &vec![true; l], split, ROPE_BASE));
    let out = attention(&mut tape, sv, &w, params.heads, m, &rope)?;
    Ok(tape.value(out).clone())
}
