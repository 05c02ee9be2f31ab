//! Image tokens, block positions, multi-axis rotary rotation and sequence
//! packing.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use neurimg_tensor::{RotaryTable, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, dim_err, CoreError, Result};

pub const ROPE_BASE: f64 = 10_000.0;

/// A `(block, row, column)` position triplet.
pub type Position = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockKind {
    Target,
    /// Context image `i`, counted from 1.
    Context(usize),
    Eeg,
    Text,
}

impl BlockKind {
    fn order(self) -> (u8, usize) {
        match self {
            BlockKind::Target => (0, 0),
            BlockKind::Context(i) => (1, i),
            BlockKind::Eeg => (2, 0),
            BlockKind::Text => (3, 0),
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Target => f.write_str("x"),
            BlockKind::Context(i) => write!(f, "y{i}"),
            BlockKind::Eeg => f.write_str("e"),
            BlockKind::Text => f.write_str("txt"),
        }
    }
}

/// How EEG tokens are laid out in position space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EegLayout {
    /// `(b, 0, j)` for token `j`.
    #[default]
    Line,
    /// Row-major on the smallest square grid that holds every token.
    Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenBlock {
    pub kind: BlockKind,
    pub tokens: Tensor,
    pub positions: Vec<Position>,
}

impl TokenBlock {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// A block of `tokens` rows with placeholder positions `(0, 0, j)`;
    /// [`assign_block_positions`] fills in the real ones.
    pub fn sequence(kind: BlockKind, tokens: Tensor) -> Self {
        let positions = (0..tokens.rows()).map(|j| [0, 0, j]).collect();
        Self { kind, tokens, positions }
    }
}

/// Raw `p×p×ch` patches of an `H×W×ch` image, one row per patch in row-major
/// grid order, each flattened as `(dy, dx, c)`.
pub fn extract_patches(image: &Tensor, p: usize) -> Result<Tensor> {
    let &[h, w, ch] = image.shape() else {
        return Err(dim_err(format!("image must be H×W×ch, got {:?}", image.shape())));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(dim_err(format!("patch {p} does not divide {h}×{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let width = p * p * ch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                let row = (gy * p + dy) * w + gx * p;
                out.extend_from_slice(&src[row * ch..(row + p) * ch]);
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, width], out)?)
}

/// Inverse of [`extract_patches`].
pub fn unpatchify(patches: &Tensor, p: usize, h: usize, w: usize, ch: usize) -> Result<Tensor> {
    if p == 0 || h % p != 0 || w % p != 0 || patches.shape() != [h * w / (p * p), p * p * ch] {
        return Err(dim_err(format!(
            "cannot unpatchify {:?} into {h}×{w}×{ch} with patch {p}",
            patches.shape()
        )));
    }
    let gw = w / p;
    let mut out = vec![0.0; h * w * ch];
    for (t, patch) in patches.data().chunks(p * p * ch).enumerate() {
        let (gy, gx) = (t / gw, t % gw);
        for dy in 0..p {
            let row = (gy * p + dy) * w + gx * p;
            out[row * ch..(row + p) * ch].copy_from_slice(&patch[dy * p * ch..(dy + 1) * p * ch]);
        }
    }
    Ok(Tensor::new(&[h, w, ch], out)?)
}

/// Patch grid positions `(b, h, w)` in row-major order.
pub fn grid_positions(b: usize, gh: usize, gw: usize) -> Vec<Position> {
    (0..gh).flat_map(|y| (0..gw).map(move |x| [b, y, x])).collect()
}

/// Tokenizes an image: patches projected by `proj` (`p²·ch × d`), placed on
/// the patch grid of a target block.
pub fn patchify(image: &Tensor, p: usize, proj: &Tensor) -> Result<TokenBlock> {
    let patches = extract_patches(image, p)?;
    let tokens = patches.matmul(proj).map_err(|_| {
        dim_err(format!("projection {:?} does not accept patches {:?}", proj.shape(), patches.shape()))
    })?;
    let (gh, gw) = (image.shape()[0] / p, image.shape()[1] / p);
    Ok(TokenBlock {
        kind: BlockKind::Target,
        tokens,
        positions: grid_positions(0, gh, gw),
    })
}

fn eeg_positions(b: usize, n: usize, layout: EegLayout) -> Vec<Position> {
    match layout {
        EegLayout::Line => (0..n).map(|j| [b, 0, j]).collect(),
        EegLayout::Grid => {
            let side = (1..).find(|s| s * s >= n).unwrap_or(1);
            (0..n).map(|j| [b, j / side, j % side]).collect()
        }
    }
}

/// Sets block indices: target 0, contexts `1..=N` in order of appearance,
/// EEG `N+1` with positions along its token index. Contexts are renumbered
/// so their kinds match their block index.
pub fn assign_block_positions(blocks: Vec<TokenBlock>, eeg_layout: EegLayout) -> Result<Vec<TokenBlock>> {
    let targets = blocks.iter().filter(|b| b.kind == BlockKind::Target).count();
    if targets > 1 {
        return Err(contract(format!("{targets} target blocks; at most one allowed")));
    }
    if blocks.iter().any(|b| b.kind == BlockKind::Text) {
        return Err(contract("text tokens are packed separately, not as a block"));
    }
    let n_ctx = blocks.iter().filter(|b| matches!(b.kind, BlockKind::Context(_))).count();
    let mut next_ctx = 0;
    blocks
        .into_iter()
        .map(|mut block| {
            let b = match block.kind {
                BlockKind::Target => 0,
                BlockKind::Context(_) => {
                    next_ctx += 1;
                    block.kind = BlockKind::Context(next_ctx);
                    next_ctx
                }
                BlockKind::Eeg => {
                    block.positions = eeg_positions(n_ctx + 1, block.len(), eeg_layout);
                    n_ctx + 1
                }
                BlockKind::Text => unreachable!(),
            };
            for pos in &mut block.positions {
                pos[0] = b;
            }
            Ok(block)
        })
        .collect()
}

/// Feature split of a rotary head across the block, row and column axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisSplit(pub [usize; 3]);

impl AxisSplit {
    /// `(d/4, 3d/8, 3d/8)`, each rounded to an even width.
    pub fn default_for(d: usize) -> Result<Self> {
        let even = |x: f64| 2 * (x / 2.0).round() as usize;
        let b = even(d as f64 / 4.0);
        let h = even(3.0 * d as f64 / 8.0);
        let split = AxisSplit([b, h, d.saturating_sub(b + h)]);
        split.validate(d)?;
        Ok(split)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let [b, h, w] = self.0;
        if b + h + w != d || b % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err(format!("axis split {:?} must be even widths summing to {d}", self.0)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.0.iter().sum()
    }
}

/// Per-pair angles for each row: the first `d_b` features turn by
/// `θ_k·b`, the next `d_h` by `θ_k·h`, the last `d_w` by `θ_k·w`, with
/// `θ_k = base^(-2k/d_axis)`. Rows with `rotate[r] == false` get zero angles.
pub fn rope_table(positions: &[Position], rotate: &[bool], split: AxisSplit, base: f64) -> RotaryTable {
    let d = split.dim();
    let mut angles = Vec::with_capacity(positions.len() * d / 2);
    for (pos, &on) in positions.iter().zip(rotate) {
        for (axis, &width) in split.0.iter().enumerate() {
            for k in 0..width / 2 {
                let theta = base.powf(-2.0 * k as f64 / width as f64);
                angles.push(if on { theta * pos[axis] as f64 } else { 0.0 });
            }
        }
    }
    RotaryTable::from_angles(positions.len(), d, &angles)
}

/// Rotates each row of `x` by its position.
pub fn rope_rotate(x: &Tensor, positions: &[Position], split: AxisSplit) -> Result<Tensor> {
    if x.rank() != 2 || x.rows() != positions.len() {
        return Err(dim_err(format!("{} positions for rows of {:?}", positions.len(), x.shape())));
    }
    split.validate(x.cols())?;
    let table = rope_table(positions, &vec![true; positions.len()], split, ROPE_BASE);
    let mut out = vec![0.0; x.len()];
    table.apply(x.data(), &mut out, false);
    Ok(Tensor::new(x.shape(), out)?)
}

/// Token order, positions and block index sets of a packed sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub positions: Vec<Position>,
    pub blocks: Vec<(BlockKind, Range<usize>)>,
    /// Whether each row is rotated; text rows are not unless asked.
    pub rotate: Vec<bool>,
}

impl Layout {
    /// Lays out `blocks` (already positioned) in packing order, followed by
    /// `text_len` text tokens at `(B, 0, j)` with `B` one past the last
    /// block index.
    pub fn new(blocks: &[(BlockKind, &[Position])], text_len: usize, rotate_text: bool) -> Self {
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.sort_by_key(|&i| blocks[i].0.order());
        let mut positions = Vec::new();
        let mut ranges = Vec::new();
        for &i in &order {
            let (kind, pos) = blocks[i];
            let start = positions.len();
            positions.extend_from_slice(pos);
            ranges.push((kind, start..positions.len()));
        }
        let n_rot = positions.len();
        let tb = blocks.iter().flat_map(|(_, p)| p.iter().map(|q| q[0] + 1)).max().unwrap_or(1);
        if text_len > 0 {
            let start = positions.len();
            positions.extend((0..text_len).map(|j| [tb, 0, j]));
            ranges.push((BlockKind::Text, start..positions.len()));
        }
        let mut rotate = vec![true; n_rot];
        rotate.resize(positions.len(), rotate_text);
        Self {
            positions,
            blocks: ranges,
            rotate,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn range(&self, kind: BlockKind) -> Option<Range<usize>> {
        self.blocks.iter().find(|(k, _)| *k == kind).map(|(_, r)| r.clone())
    }

    /// Index sets per block, in sequence order.
    pub fn block_sets(&self) -> Vec<(BlockKind, Vec<usize>)> {
        self.blocks.iter().map(|(k, r)| (*k, r.clone().collect())).collect()
    }

    pub fn rope(&self, split: AxisSplit, base: f64) -> Arc<RotaryTable> {
        Arc::new(rope_table(&self.positions, &self.rotate, split, base))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedSequence {
    pub tokens: Tensor,
    pub layout: Layout,
}

impl PackedSequence {
    pub fn block(&self, kind: BlockKind) -> Option<Tensor> {
        let r = self.layout.range(kind)?;
        self.tokens.slice_rows(r.start, r.end).ok()
    }
}

/// Concatenates `[target; contexts; eeg; text]` into one sequence.
pub fn pack(blocks: &[TokenBlock], text: &Tensor, rotate_text: bool) -> Result<PackedSequence> {
    let d = text.cols();
    if let Some(b) = blocks.iter().find(|b| b.tokens.cols() != d || b.tokens.rows() != b.len()) {
        return Err(dim_err(format!(
            "block {} has tokens {:?}, expected width {d}",
            b.kind,
            b.tokens.shape()
        )));
    }
    let specs: Vec<(BlockKind, &[Position])> = blocks.iter().map(|b| (b.kind, b.positions.as_slice())).collect();
    let layout = Layout::new(&specs, text.rows(), rotate_text);
    let mut parts: Vec<&Tensor> = Vec::with_capacity(blocks.len() + 1);
    for (kind, _) in &layout.blocks {
        if *kind == BlockKind::Text {
            parts.push(text);
        } else if let Some(b) = blocks.iter().find(|b| b.kind == *kind) {
            parts.push(&b.tokens);
        }
    }
    let tokens = Tensor::vstack(&parts)?;
    Ok(PackedSequence { tokens, layout })
}

/// Parses a layout such as `x:4,y1:4,e:2,txt:3` into block kinds and sizes.
pub fn parse_layout(spec: &str) -> Result<Vec<(BlockKind, usize)>> {
    let bad = |m: String| CoreError::Parse(format!("layout `{spec}`: {m}"));
    let mut out: Vec<(BlockKind, usize)> = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, n) = part.split_once(':').ok_or_else(|| bad(format!("`{part}` is not name:count")))?;
        let n: usize = n.trim().parse().map_err(|_| bad(format!("bad count in `{part}`")))?;
        if n == 0 {
            return Err(bad(format!("empty block `{part}`")));
        }
        let kind = match name.trim() {
            "x" => BlockKind::Target,
            "e" => BlockKind::Eeg,
            "txt" => BlockKind::Text,
            other => match other.strip_prefix('y').and_then(|i| i.parse::<usize>().ok()) {
                Some(i) if i >= 1 => BlockKind::Context(i),
                _ => return Err(bad(format!("unknown block `{other}`"))),
            },
        };
        if out.iter().any(|(k, _)| *k == kind) {
            return Err(bad(format!("block `{kind}` repeated")));
        }
        out.push((kind, n));
    }
    if out.is_empty() {
        return Err(bad("no blocks".into()));
    }
    Ok(out)
}

/// Packing-order layout for parsed block sizes; image blocks get a
/// one-row grid, which is enough for masking.
pub fn layout_from_sizes(sizes: &[(BlockKind, usize)]) -> Layout {
    let text_len = sizes.iter().find(|(k, _)| *k == BlockKind::Text).map_or(0, |s| s.1);
    let positions: Vec<(BlockKind, Vec<Position>)> = sizes
        .iter()
        .filter(|(k, _)| *k != BlockKind::Text)
        .map(|&(k, n)| (k, (0..n).map(|j| [0, 0, j]).collect()))
        .collect();
    let specs: Vec<(BlockKind, &[Position])> = positions.iter().map(|(k, p)| (*k, p.as_slice())).collect();
    Layout::new(&specs, text_len, false)
}
