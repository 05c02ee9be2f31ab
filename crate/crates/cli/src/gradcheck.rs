//! Central-difference checks of every autodiff op and of a small
//! end-to-end denoiser.

use std::sync::Arc;

use neurimg_core::conditioning::Fusion;
use neurimg_core::params::Binder;
use neurimg_core::{CondInput, Mode, Model, ModelConfig};
use neurimg_tensor::{grad_check_with, OpKind, RotaryTable, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-5;
const SEEDS: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn project(t: &mut Tape, y: Var, seed: u64) -> neurimg_tensor::Result<Var> {
    let w = t.constant(Tensor::randn(t.shape(y), 1.0, &mut rng(seed)));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> neurimg_tensor::Result<Var> + Sync>;

fn op_cases() -> Vec<(OpKind, &'static str, Vec<Vec<usize>>, OpFn)> {
    let angles: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.5).collect();
    let table = Arc::new(RotaryTable::from_angles(3, 4, &angles));
    vec![
        (OpKind::Add, "add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        (OpKind::Sub, "sub", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.sub(v[0], v[1]))),
        (OpKind::Mul, "mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        (OpKind::Scale, "scale", vec![vec![3, 4]], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        (OpKind::AddBias, "add_bias", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.add_bias(v[0], v[1]))),
        (OpKind::MatMul, "matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        (OpKind::Transpose, "transpose", vec![vec![3, 4]], Box::new(|t, v| t.transpose(v[0]))),
        (OpKind::Reshape, "reshape", vec![vec![3, 4]], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        (OpKind::Concat, "concat", vec![vec![2, 3], vec![2, 2]], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        (OpKind::Slice, "slice", vec![vec![4, 5]], Box::new(|t, v| t.slice(v[0], 1, 1, 4))),
        (OpKind::Gelu, "gelu", vec![vec![3, 4]], Box::new(|t, v| Ok(t.gelu(v[0])))),
        (OpKind::Softmax, "softmax", vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0], 1))),
        (OpKind::LayerNorm, "layer_norm", vec![vec![3, 5]], Box::new(|t, v| t.layer_norm(v[0], 1e-5))),
        (OpKind::Mse, "mse", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mse(v[0], v[1]))),
        (OpKind::Sum, "sum", vec![vec![3, 4]], Box::new(|t, v| Ok(t.sum(v[0])))),
        (OpKind::Rotary, "rotary", vec![vec![3, 4]], Box::new(move |t, v| t.rotary(v[0], table.clone()))),
        (OpKind::Unfold1d, "unfold1d", vec![vec![9, 2]], Box::new(|t, v| t.unfold1d(v[0], 3, 2, 1))),
        (
            OpKind::CrossEntropy,
            "cross_entropy",
            vec![vec![4, 3]],
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
        ),
    ]
}

fn make_tape(fault: Option<OpKind>) -> Tape {
    fault.map_or_else(Tape::new, Tape::with_fault)
}

/// Worst error of one op over a few random inputs.
fn check_op(fault: Option<OpKind>, shapes: &[Vec<usize>], f: &OpFn) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut r = rng(500 + seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
        let err = grad_check_with(
            || make_tape(fault),
            |t, v| {
                let y = f(t, v)?;
                project(t, y, 900 + seed)
            },
            &inputs,
            STEP,
            1,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// A depth-1, width-16 denoiser with every parameter randomized, so that
/// zero-initialized weights do not hide gradient paths.
pub fn tiny_model() -> Result<Model> {
    let config = ModelConfig {
        image_size: 4,
        patch: 2,
        depth: 1,
        d_model: 16,
        heads: 2,
        mlp_ratio: 2,
        time_dim: 8,
        text_len: 3,
        d_text: 8,
        d_pooled: 4,
        vocab: 32,
        eeg_channels: 2,
        conv_widths: vec![4],
        conv_kernel: 3,
        eeg_tokens: 2,
        lora_rank: 2,
        lora_alpha: 4.0,
        seed: 11,
        ..ModelConfig::default()
    };
    let mut model = Model::new(config)?;
    let mut r = rng(12);
    for (_, p) in model.params.iter_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.3, &mut r);
    }
    Ok(model)
}

/// Loss `mse(v, target)` of the denoiser, differentiated with respect to
/// every parameter and the noisy latent.
pub fn check_denoiser(model: &Model, mode: Mode, fault: Option<OpKind>) -> Result<f64> {
    let c = &model.config;
    let mut r = rng(13);
    let n = c.grid() * c.grid();
    let z = Tensor::randn(&[n, c.patch_dim()], 1.0, &mut r);
    let target = Tensor::randn(&[n, c.patch_dim()], 1.0, &mut r);
    let epoch = Tensor::randn(&[c.eeg_channels, 12], 1.0, &mut r);
    let context = Tensor::uniform(&[c.image_size, c.image_size, c.channels], 0.0, 1.0, &mut r);
    let mut input = match mode {
        Mode::Text => CondInput::text("style 1"),
        Mode::Eeg => CondInput::eeg(epoch),
        Mode::TextEeg => CondInput::text_eeg("style 1", epoch),
    };
    input.contexts.push(context);
    let mut inputs: Vec<Tensor> = model.params.iter().map(|(_, p)| p.value.clone()).collect();
    inputs.push(z);
    let np = model.params.len();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let stride = (total / 1500).max(1);
    let err = grad_check_with(
        || make_tape(fault),
        |t, v| {
            let mut b = Binder::preset(&model.params, &v[..np]);
            let cond = model.assemble_vars(t, &mut b, &input).map_err(to_tensor_err)?;
            let out = model.velocity_var(t, &mut b, v[np], 0.37, &cond).map_err(to_tensor_err)?;
            let tg = t.constant(target.clone());
            t.mse(out, tg)
        },
        &inputs,
        STEP,
        stride,
    )?;
    Ok(err)
}

fn to_tensor_err(e: neurimg_core::CoreError) -> neurimg_tensor::TensorError {
    match e {
        neurimg_core::CoreError::Tensor(t) => t,
        other => neurimg_tensor::TensorError::Contract(other.to_string()),
    }
}

/// Runs every check. With `fault`, that op's backward rule is perturbed and
/// the corresponding checks are expected to fail.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (_, name, shapes, f) in op_cases() {
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_err: check_op(fault, &shapes, &f)?,
            tolerance: OP_TOLERANCE,
        });
    }
    let mut model = tiny_model()?;
    for (mode, fusion) in [(Mode::TextEeg, Fusion::Augment), (Mode::Eeg, Fusion::Substitute)] {
        model.config.fusion = fusion;
        out.push(CheckResult {
            name: format!("denoiser[{mode}]"),
            max_rel_err: check_denoiser(&model, mode, fault)?,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(out)
}

/// One line per check and a summary line.
pub fn report(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{:<20} max_rel_err={:.3e} tol={:.0e} {}\n",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAILED" }
        ));
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    s.push_str(&format!("{} checks, {failed} failed\n", results.len()));
    s
}
