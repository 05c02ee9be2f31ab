use std::collections::HashSet;

use neurimg_core::tokens::{grid_positions, layout_from_sizes, patchify, rope_table};
use neurimg_core::{
    assign_block_positions, extract_patches, pack, parse_layout, rope_rotate, unpatchify, AxisSplit, BlockKind, CoreError,
    EegLayout, Position, TokenBlock,
};
use neurimg_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn block(kind: BlockKind, n: usize, d: usize, seed: u64) -> TokenBlock {
    TokenBlock::sequence(kind, Tensor::randn(&[n, d], 1.0, &mut rng(seed)))
}

/// Rotation written out pair by pair from the angle schedule.
fn rope_oracle(x: &[f64], pos: Position, split: [usize; 3]) -> Vec<f64> {
    let mut out = x.to_vec();
    let mut offset = 0;
    for axis in 0..3 {
        let width = split[axis];
        for k in 0..width / 2 {
            let theta = 10_000f64.powf(-(2.0 * k as f64) / width as f64) * pos[axis] as f64;
            let (a, b) = (x[offset + 2 * k], x[offset + 2 * k + 1]);
            out[offset + 2 * k] = a * theta.cos() - b * theta.sin();
            out[offset + 2 * k + 1] = a * theta.sin() + b * theta.cos();
        }
        offset += width;
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate_row(x: &Tensor, pos: Position, split: AxisSplit) -> Vec<f64> {
    rope_rotate(x, &[pos], split).unwrap().into_data()
}

#[test]
fn patchify_16x16_gives_64_grid_tokens() {
    let img = Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng(1));
    let blk = patchify(&img, 2, &Tensor::eye(12)).unwrap();
    assert_eq!(blk.tokens.shape(), &[64, 12]);
    let expected: Vec<Position> = (0..8).flat_map(|h| (0..8).map(move |w| [0, h, w])).collect();
    assert_eq!(blk.positions, expected);
}

#[test]
fn whole_image_patch_is_one_token() {
    let img = Tensor::uniform(&[4, 4, 3], 0.0, 1.0, &mut rng(2));
    let blk = patchify(&img, 4, &Tensor::eye(48)).unwrap();
    assert_eq!(blk.positions, vec![[0, 0, 0]]);
    assert_eq!(blk.tokens.shape(), &[1, 48]);
}

#[test]
fn patch_layout_matches_pixel_indexing() {
    let img = Tensor::uniform(&[6, 4, 2], 0.0, 1.0, &mut rng(3));
    let p = extract_patches(&img, 2).unwrap();
    for gy in 0..3 {
        for gx in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    for c in 0..2 {
                        let want = img.at(&[gy * 2 + dy, gx * 2 + dx, c]);
                        assert_eq!(p.at(&[gy * 2 + gx, (dy * 2 + dx) * 2 + c]), want);
                    }
                }
            }
        }
    }
}

#[test]
fn unpatchify_inverts_identity_patchify() {
    for (h, w, p, seed) in [(16, 16, 2, 4), (8, 12, 4, 5), (3, 3, 1, 6), (6, 6, 6, 7)] {
        let img = Tensor::uniform(&[h, w, 3], 0.0, 1.0, &mut rng(seed));
        let blk = patchify(&img, p, &Tensor::eye(p * p * 3)).unwrap();
        assert_eq!(unpatchify(&blk.tokens, p, h, w, 3).unwrap(), img);
    }
}

#[test]
fn patchify_rejects_non_dividing_patch() {
    let img = Tensor::zeros(&[10, 10, 3]);
    assert!(matches!(extract_patches(&img, 3), Err(CoreError::Dimension(_))));
    assert!(matches!(extract_patches(&img, 0), Err(CoreError::Dimension(_))));
    assert!(matches!(patchify(&img, 2, &Tensor::eye(5)), Err(CoreError::Dimension(_))));
}

#[test]
fn patchify_applies_projection() {
    let img = Tensor::uniform(&[4, 4, 3], 0.0, 1.0, &mut rng(8));
    let proj = Tensor::randn(&[12, 5], 1.0, &mut rng(9));
    let blk = patchify(&img, 2, &proj).unwrap();
    let raw = extract_patches(&img, 2).unwrap();
    assert_eq!(blk.tokens, raw.matmul(&proj).unwrap());
}

fn grid_block(kind: BlockKind, g: usize) -> TokenBlock {
    TokenBlock {
        kind,
        tokens: Tensor::zeros(&[g * g, 4]),
        positions: grid_positions(0, g, g),
    }
}

#[test]
fn block_indices_follow_context_order() {
    let blocks = vec![
        grid_block(BlockKind::Target, 2),
        grid_block(BlockKind::Context(1), 2),
        grid_block(BlockKind::Context(2), 2),
    ];
    let out = assign_block_positions(blocks, EegLayout::Line).unwrap();
    let b: Vec<usize> = out.iter().map(|blk| blk.positions[0][0]).collect();
    assert_eq!(b, vec![0, 1, 2]);
    for blk in &out {
        assert!(blk.positions.iter().all(|p| p[0] == blk.positions[0][0]));
    }

    let alone = assign_block_positions(vec![grid_block(BlockKind::Target, 2)], EegLayout::Line).unwrap();
    assert!(alone[0].positions.iter().all(|p| p[0] == 0));
}

#[test]
fn eeg_block_follows_last_context() {
    let out = assign_block_positions(
        vec![grid_block(BlockKind::Target, 2), block(BlockKind::Eeg, 3, 4, 1)],
        EegLayout::Line,
    )
    .unwrap();
    assert_eq!(out[1].positions, vec![[1, 0, 0], [1, 0, 1], [1, 0, 2]]);

    let out = assign_block_positions(
        vec![
            grid_block(BlockKind::Target, 2),
            grid_block(BlockKind::Context(1), 2),
            grid_block(BlockKind::Context(2), 2),
            block(BlockKind::Eeg, 5, 4, 2),
        ],
        EegLayout::Grid,
    )
    .unwrap();
    assert_eq!(out[3].positions, vec![[3, 0, 0], [3, 0, 1], [3, 0, 2], [3, 1, 0], [3, 1, 1]]);
    let all: Vec<Position> = out.iter().flat_map(|b| b.positions.clone()).collect();
    let unique: HashSet<Position> = all.iter().copied().collect();
    assert_eq!(unique.len(), all.len());
}

#[test]
fn two_targets_are_rejected() {
    let blocks = vec![grid_block(BlockKind::Target, 2), grid_block(BlockKind::Target, 2)];
    assert!(matches!(assign_block_positions(blocks, EegLayout::Line), Err(CoreError::Contract(_))));
}

#[test]
fn rope_is_identity_at_origin() {
    let split = AxisSplit::default_for(16).unwrap();
    let x = Tensor::randn(&[3, 16], 1.0, &mut rng(10));
    let out = rope_rotate(&x, &[[0, 0, 0]; 3], split).unwrap();
    assert_eq!(out, x);
}

#[test]
fn rope_matches_pairwise_oracle() {
    let mut r = rng(11);
    for split in [[4, 6, 6], [2, 2, 4], [8, 0, 8]] {
        let d: usize = split.iter().sum();
        for _ in 0..20 {
            let x = Tensor::randn(&[1, d], 1.0, &mut r);
            let pos = [r.random_range(0..9), r.random_range(0..9), r.random_range(0..9)];
            let got = rotate_row(&x, pos, AxisSplit(split));
            let want = rope_oracle(x.data(), pos, split);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rope_preserves_row_norms() {
    let split = AxisSplit::default_for(16).unwrap();
    let mut r = rng(12);
    let positions: Vec<Position> = (0..50).map(|_| [r.random_range(0..20), r.random_range(0..20), r.random_range(0..20)]).collect();
    let x = Tensor::randn(&[50, 16], 3.0, &mut r);
    let out = rope_rotate(&x, &positions, split).unwrap();
    for i in 0..50 {
        let a = dot(x.row(i), x.row(i)).sqrt();
        let b = dot(out.row(i), out.row(i)).sqrt();
        assert!((a - b).abs() < 1e-12, "row {i}: {a} vs {b}");
    }
}

#[test]
fn rope_scores_depend_only_on_relative_position() {
    let split = AxisSplit::default_for(16).unwrap();
    let mut r = rng(13);
    let q = Tensor::randn(&[1, 16], 1.0, &mut r);
    let k = Tensor::randn(&[1, 16], 1.0, &mut r);
    let base = [2, 1, 3];
    let mut worst = 0.0f64;
    for axis in 0..3 {
        for m in 0..5 {
            for n in 0..5 {
                for s in 0..5 {
                    let mut um = base;
                    let mut un = base;
                    um[axis] = m;
                    un[axis] = n;
                    let s0 = dot(&rotate_row(&q, um, split), &rotate_row(&k, un, split));
                    um[axis] += s;
                    un[axis] += s;
                    let s1 = dot(&rotate_row(&q, um, split), &rotate_row(&k, un, split));
                    worst = worst.max((s0 - s1).abs());
                }
            }
        }
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn odd_split_is_rejected() {
    let x = Tensor::zeros(&[1, 8]);
    assert!(matches!(rope_rotate(&x, &[[0, 0, 0]], AxisSplit([3, 3, 2])), Err(CoreError::Dimension(_))));
    assert!(matches!(rope_rotate(&x, &[[0, 0, 0]], AxisSplit([2, 2, 2])), Err(CoreError::Dimension(_))));
}

#[test]
fn default_split_is_even_quarter_and_three_eighths() {
    assert_eq!(AxisSplit::default_for(16).unwrap(), AxisSplit([4, 6, 6]));
    assert_eq!(AxisSplit::default_for(64).unwrap(), AxisSplit([16, 24, 24]));
    assert_eq!(AxisSplit::default_for(8).unwrap(), AxisSplit([2, 4, 2]));
}

#[test]
fn text_rows_are_not_rotated_by_default() {
    let l = layout_from_sizes(&[(BlockKind::Target, 2), (BlockKind::Text, 2)]);
    let table = rope_table(&l.positions, &l.rotate, AxisSplit([2, 2, 2]), 10_000.0);
    let x: Vec<f64> = (0..24).map(|i| i as f64 + 1.0).collect();
    let mut out = vec![0.0; 24];
    table.apply(&x, &mut out, false);
    assert_eq!(&out[12..], &x[12..]);
}

#[test]
fn pack_example_offsets() {
    let blocks = vec![
        block(BlockKind::Target, 4, 6, 1),
        block(BlockKind::Context(1), 4, 6, 2),
        block(BlockKind::Eeg, 2, 6, 3),
    ];
    let blocks = assign_block_positions(blocks, EegLayout::Line).unwrap();
    let text = Tensor::randn(&[3, 6], 1.0, &mut rng(4));
    let packed = pack(&blocks, &text, false).unwrap();
    assert_eq!(packed.layout.len(), 13);
    assert_eq!(
        packed.layout.block_sets(),
        vec![
            (BlockKind::Target, vec![0, 1, 2, 3]),
            (BlockKind::Context(1), vec![4, 5, 6, 7]),
            (BlockKind::Eeg, vec![8, 9]),
            (BlockKind::Text, vec![10, 11, 12]),
        ]
    );
    for b in &blocks {
        assert_eq!(packed.block(b.kind).unwrap(), b.tokens);
    }
    assert_eq!(packed.block(BlockKind::Text).unwrap(), text);
}

#[test]
fn pack_without_contexts_is_contiguous() {
    let blocks = vec![block(BlockKind::Eeg, 2, 4, 1), block(BlockKind::Target, 3, 4, 2)];
    let blocks = assign_block_positions(blocks, EegLayout::Line).unwrap();
    let packed = pack(&blocks, &Tensor::zeros(&[2, 4]), false).unwrap();
    assert_eq!(
        packed.layout.block_sets(),
        vec![
            (BlockKind::Target, vec![0, 1, 2]),
            (BlockKind::Eeg, vec![3, 4]),
            (BlockKind::Text, vec![5, 6]),
        ]
    );
}

#[test]
fn pack_rejects_width_mismatch() {
    let blocks = vec![block(BlockKind::Target, 2, 4, 1)];
    assert!(matches!(pack(&blocks, &Tensor::zeros(&[2, 5]), false), Err(CoreError::Dimension(_))));
}

#[test]
fn parse_layout_examples_and_errors() {
    assert_eq!(
        parse_layout("x:4,y1:4,e:2,txt:3").unwrap(),
        vec![
            (BlockKind::Target, 4),
            (BlockKind::Context(1), 4),
            (BlockKind::Eeg, 2),
            (BlockKind::Text, 3)
        ]
    );
    for bad in ["", "x", "x:0", "x:1,x:2", "q:1", "y0:1", "x:a"] {
        assert!(matches!(parse_layout(bad), Err(CoreError::Parse(_))), "{bad}");
    }
}

fn random_blocks(seed: u64) -> (Vec<TokenBlock>, usize) {
    let mut r = rng(seed);
    let d = 4;
    let g = r.random_range(1..4);
    let mut blocks = vec![grid_block(BlockKind::Target, g)];
    for i in 0..r.random_range(0..4) {
        blocks.push(grid_block(BlockKind::Context(i + 1), g));
    }
    if r.random_bool(0.5) {
        blocks.push(block(BlockKind::Eeg, r.random_range(1..6), d, seed));
    }
    for _ in 0..blocks.len() {
        let i = r.random_range(0..blocks.len());
        let j = r.random_range(0..blocks.len());
        blocks.swap(i, j);
    }
    (blocks, r.random_range(1..5))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn block_sets_partition_and_positions_are_unique(seed in any::<u64>()) {
        let (blocks, m) = random_blocks(seed);
        let blocks = assign_block_positions(blocks, EegLayout::Line).unwrap();
        let packed = pack(&blocks, &Tensor::zeros(&[m, 4]), false).unwrap();
        let l = packed.layout.len();
        let mut seen = vec![0usize; l];
        for (_, set) in packed.layout.block_sets() {
            for i in set {
                prop_assert!(i < l);
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let unique: HashSet<Position> = packed.layout.positions.iter().copied().collect();
        prop_assert_eq!(unique.len(), l);
    }
}
