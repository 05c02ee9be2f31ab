//! Rectified-flow training objective, AdamW with global-norm clipping, and
//! Euler integration of the learned velocity field.

use std::path::Path;

use indexmap::IndexMap;
use neurimg_tensor::{read_unt1, write_unt1, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{CondInput, ConditionSet};
use crate::error::{contract, dim_err, CoreError, Result};
use crate::model::Model;
use crate::params::{Binder, ParamStore};

/// `(1 - σ)·z0 + σ·ε`.
pub fn make_path(z0: &Tensor, eps: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(contract(format!("sigma {sigma} outside [0, 1]")));
    }
    if z0.shape() != eps.shape() {
        return Err(dim_err(format!("path endpoints {:?} and {:?}", z0.shape(), eps.shape())));
    }
    Ok(z0.zip_map(eps, |a, b| (1.0 - sigma) * a + sigma * b)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaSchedule {
    #[default]
    Uniform,
    LogitNormal { m: f64, s: f64 },
}

pub fn sample_sigma<R: Rng + ?Sized>(rng: &mut R, schedule: SigmaSchedule) -> f64 {
    match schedule {
        SigmaSchedule::Uniform => rng.random::<f64>(),
        SigmaSchedule::LogitNormal { m, s } => {
            let n: f64 = StandardNormal.sample(rng);
            1.0 / (1.0 + (-(m + s * n)).exp())
        }
    }
}

/// One training example on the noise path.
#[derive(Clone, Debug)]
pub struct FlowItem {
    /// Clean latent tokens.
    pub z0: Tensor,
    pub eps: Tensor,
    pub sigma: f64,
    pub cond: CondInput,
    /// Prompt whose stub features the neural projections are pulled toward.
    pub align_to: Option<String>,
}

impl FlowItem {
    pub fn z_sigma(&self) -> Result<Tensor> {
        make_path(&self.z0, &self.eps, self.sigma)
    }

    /// Velocity target `ε - z0`.
    pub fn target(&self) -> Result<Tensor> {
        Ok(self.eps.sub(&self.z0)?)
    }
}

/// Mean squared error of `v` against the velocity target, `w(σ) = 1`.
pub fn fm_loss_var(tape: &mut Tape, v: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    Ok(tape.mse(v, t)?)
}

struct ItemLoss {
    total: Var,
    fm: Var,
}

fn item_loss(model: &Model, tape: &mut Tape, b: &mut Binder, item: &FlowItem, align_weight: f64) -> Result<ItemLoss> {
    let cond = model.assemble_vars(tape, b, &item.cond)?;
    let z = tape.constant(item.z_sigma()?);
    let v = model.velocity_var(tape, b, z, item.sigma, &cond)?;
    let fm = fm_loss_var(tape, v, &item.target()?)?;
    let mut total = fm;
    if let (Some(prompt), Some((t_sub, g_sub)), true) = (&item.align_to, cond.neural, align_weight > 0.0) {
        let (t, g) = model.encode_text_stub(prompt)?;
        let t = tape.constant(t);
        let g = tape.constant(g);
        let lt = tape.mse(t_sub, t)?;
        let lg = tape.mse(g_sub, g)?;
        let la = tape.add(lt, lg)?;
        let la = tape.scale(la, align_weight);
        total = tape.add(total, la)?;
    }
    Ok(ItemLoss { total, fm })
}

/// Mean flow-matching loss over `batch`, without gradients.
pub fn fm_loss(model: &Model, batch: &[FlowItem]) -> Result<f64> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let losses = batch
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let mut b = Binder::new(&model.params, false);
            let l = item_loss(model, &mut tape, &mut b, item, 0.0)?;
            Ok(tape.value(l.fm).item())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    /// First and second moments by parameter name.
    pub moments: IndexMap<String, (Tensor, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct AdamWMeta {
    config: AdamWConfig,
    step: u64,
    names: Vec<String>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// Decoupled-decay Adam update of every trainable parameter; parameters
    /// without a gradient are treated as having a zero one.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (i, (name, p)) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let shape = p.value.shape().to_vec();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let g = grads[i].as_ref();
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.value.data_mut());
            for j in 0..pd.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                md[j] = c.beta1 * md[j] + (1.0 - c.beta1) * gj;
                vd[j] = c.beta2 * vd[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * pd[j]);
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = AdamWMeta {
            config: self.config,
            step: self.step,
            names: self.moments.keys().cloned().collect(),
        };
        std::fs::write(dir.join("opt.json"), serde_json::to_string_pretty(&meta)?)?;
        for (name, (m, v)) in &self.moments {
            write_unt1(dir.join(format!("opt.m.{name}.unt")), m)?;
            write_unt1(dir.join(format!("opt.v.{name}.unt")), v)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: AdamWMeta = serde_json::from_slice(&std::fs::read(dir.join("opt.json"))?)?;
        let mut moments = IndexMap::new();
        for name in meta.names {
            let m = read_unt1(dir.join(format!("opt.m.{name}.unt")))?;
            let v = read_unt1(dir.join(format!("opt.v.{name}.unt")))?;
            moments.insert(name, (m, v));
        }
        Ok(Self {
            config: meta.config,
            step: meta.step,
            moments,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Mean objective including any alignment term.
    pub loss: f64,
    /// Mean flow-matching part.
    pub fm_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Mean loss and gradients over `batch`. Items run independently (in
/// parallel when threads are available) and are reduced in batch order.
pub fn batch_gradients(model: &Model, batch: &[FlowItem], align_weight: f64) -> Result<(StepReport, Vec<Option<Tensor>>)> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let per_item = batch
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let mut b = Binder::new(&model.params, true);
            let l = item_loss(model, &mut tape, &mut b, item, align_weight)?;
            tape.backward(l.total)?;
            Ok((tape.value(l.total).item(), tape.value(l.fm).item(), b.grads(&tape)))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = batch.len() as f64;
    let mut grads: Vec<Option<Tensor>> = vec![None; model.params.len()];
    let (mut loss, mut fm) = (0.0, 0.0);
    for (l, f, gs) in per_item {
        loss += l;
        fm += f;
        for (i, g) in gs {
            match &mut grads[i] {
                Some(acc) => *acc = acc.add(&g)?,
                None => grads[i] = Some(g),
            }
        }
    }
    let mut sq = 0.0;
    for g in grads.iter_mut().flatten() {
        *g = g.scale(1.0 / n);
        sq += g.data().iter().map(|x| x * x).sum::<f64>();
    }
    let report = StepReport {
        loss: loss / n,
        fm_loss: fm / n,
        grad_norm: sq.sqrt(),
    };
    Ok((report, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub clip: f64,
    pub align_weight: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            clip: 1.0,
            align_weight: 0.0,
        }
    }
}

/// One AdamW step on the trainable parameters. A non-finite loss aborts
/// before any parameter changes.
pub fn train_step(model: &mut Model, batch: &[FlowItem], opt: &mut AdamW, lr: f64, options: StepOptions) -> Result<StepReport> {
    let (report, mut grads) = batch_gradients(model, batch, options.align_weight).map_err(|e| match e {
        CoreError::Tensor(TensorError::Numeric(m)) => CoreError::Numeric(format!("{m} at optimizer step {}", opt.step + 1)),
        other => other,
    })?;
    if !report.loss.is_finite() || !report.grad_norm.is_finite() {
        return Err(CoreError::Numeric(format!(
            "non-finite training loss {} (grad norm {}) at optimizer step {}",
            report.loss,
            report.grad_norm,
            opt.step + 1
        )));
    }
    if report.grad_norm > options.clip {
        let s = options.clip / report.grad_norm;
        for g in grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }
    opt.update(&mut model.params, &grads, lr);
    Ok(report)
}

pub trait VelocityField {
    /// Predicted `dz/dσ` at `(z, σ)`.
    fn velocity(&self, z: &Tensor, sigma: f64) -> Result<Tensor>;
}

/// Integrates from `σ = 1` to `σ = 0` on a uniform grid:
/// `z ← z − Δσ·v(z, σ)`.
pub fn euler_sample<F: VelocityField + ?Sized>(field: &F, noise: Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(contract("at least one Euler step is required"));
    }
    let dt = 1.0 / steps as f64;
    let mut z = noise;
    for i in 0..steps {
        let sigma = 1.0 - i as f64 * dt;
        let v = field.velocity(&z, sigma)?;
        if v.shape() != z.shape() {
            return Err(dim_err(format!("velocity {:?} for state {:?}", v.shape(), z.shape())));
        }
        z = z.zip_map(&v, |a, b| a - dt * b)?;
    }
    Ok(z)
}

/// The denoiser under fixed conditions.
pub struct ModelField<'a> {
    pub model: &'a Model,
    pub cond: ConditionSet,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, z: &Tensor, sigma: f64) -> Result<Tensor> {
        self.model.velocity(z, sigma, &self.cond)
    }
}

/// Gaussian latent tokens for sampling seed `seed`.
pub fn noise_tokens(model: &Model, seed: u64) -> Tensor {
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[c.grid() * c.grid(), c.patch_dim()], 1.0, &mut rng)
}

/// Generates one image (`H × W × ch` in `[0, 1]`) for `input`.
pub fn sample_image(model: &Model, input: &CondInput, steps: usize, seed: u64) -> Result<Tensor> {
    let field = ModelField {
        model,
        cond: model.assemble(input)?,
    };
    let z = euler_sample(&field, noise_tokens(model, seed), steps)?;
    if !z.all_finite() {
        return Err(CoreError::Numeric("sampler produced non-finite latents".into()));
    }
    model.decode_latent(&z)
}
