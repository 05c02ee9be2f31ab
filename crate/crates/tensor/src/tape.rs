//! Reverse-mode gradient tape.
//!
//! Nodes are appended in creation order, so every parent precedes its
//! consumers and the reverse of creation order is a valid topological order
//! for the backward sweep. Leaf gradients accumulate across `backward` calls
//! until [`Tape::zero_grad`]; interior gradients are recomputed each sweep.

use std::fmt;
use std::sync::Arc;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::gemm;
use crate::rotary::RotaryTable;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Gelu,
    Softmax,
    LayerNorm,
    Mse,
    Sum,
    Rotary,
    Unfold1d,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddBias,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Mse,
        OpKind::Sum,
        OpKind::Rotary,
        OpKind::Unfold1d,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddBias => "add_bias",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Mse => "mse",
            OpKind::Sum => "sum",
            OpKind::Rotary => "rotary",
            OpKind::Unfold1d => "unfold1d",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Gelu(Var),
    Softmax { src: Var, axis: usize },
    LayerNorm { src: Var, inv_std: Vec<f64> },
    Mse(Var, Var),
    Sum(Var),
    Rotary { src: Var, table: Arc<RotaryTable> },
    Unfold1d { src: Var, kernel: usize, stride: usize, pad: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias(..) => OpKind::AddBias,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Mse(..) => OpKind::Mse,
            Op::Sum(..) => OpKind::Sum,
            Op::Rotary { .. } => OpKind::Rotary,
            Op::Unfold1d { .. } => OpKind::Unfold1d,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A single-threaded computation record. Independent tapes share nothing and
/// may live on separate threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

// tanh-approximated GELU
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `(outer, len, inner)` strides around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong by a
    /// factor of 1.001. Exists so the gradient-check harness can prove it
    /// detects broken rules.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Clears every gradient buffer, leaves included.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.value(a).zip_map(self.value(b), f).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Adds a length-d vector to every trailing-axis row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(bias);
        let d = *sa.last().unwrap_or(&1);
        if sa.is_empty() || sb != [d] {
            return Err(shape_err("add_bias", sa, sb));
        }
        let mut v = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_mut(d) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(v, Op::AddBias(a, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Takes `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(shape_err("slice", &s, &[axis, start, end]));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let width = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        let v = Tensor::new(&shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Slice { src: a, axis, start }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_scalar);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Softmax along `axis` with max subtraction. Entries may be `-inf`; a
    /// slice that is entirely `-inf` maps to all zeros.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(shape_err("softmax", x.shape(), &[axis]));
        }
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric("NaN input to softmax".into()));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| o * len * inner + i * inner + j;
                let m = (0..len).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for i in 0..len {
                    let e = (src[idx(i)] - m).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..len {
                    out[idx(i)] /= z;
                }
            }
        }
        let v = Tensor::new(x.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Softmax { src: a, axis }, rg))
    }

    /// Normalizes each trailing-axis row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().unwrap_or(&0);
        if d < 2 {
            return Err(shape_err("layer_norm", x.shape(), &[2]));
        }
        let mut out = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let v = Tensor::new(x.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::LayerNorm { src: a, inv_std }, rg))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mse", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Applies a fixed rotation table to a `rows × dim` matrix.
    pub fn rotary(&mut self, a: Var, table: Arc<RotaryTable>) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != [table.rows(), table.dim()] {
            return Err(shape_err("rotary", x.shape(), &[table.rows(), table.dim()]));
        }
        let mut out = vec![0.0; x.len()];
        table.apply(x.data(), &mut out, false);
        let v = Tensor::new(x.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Rotary { src: a, table }, rg))
    }

    /// Sliding windows over a `time × channels` matrix, zero-padded by `pad`
    /// on both ends. Output row `t` holds the `kernel` consecutive input rows
    /// starting at `t * stride - pad`, flattened time-major.
    pub fn unfold1d(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || kernel == 0 || stride == 0 || x.rows() + 2 * pad < kernel {
            return Err(shape_err("unfold1d", x.shape(), &[kernel, stride, pad]));
        }
        let (t_in, c) = (x.rows(), x.cols());
        let t_out = (t_in + 2 * pad - kernel) / stride + 1;
        let src = x.data();
        let mut out = vec![0.0; t_out * kernel * c];
        for t in 0..t_out {
            for j in 0..kernel {
                let s = (t * stride + j) as isize - pad as isize;
                if s < 0 || s as usize >= t_in {
                    continue;
                }
                let s = s as usize;
                let dst = t * kernel * c + j * c;
                out[dst..dst + c].copy_from_slice(&src[s * c..(s + 1) * c]);
            }
        }
        let v = Tensor::new(&[t_out, kernel * c], out)?;
        let rg = self.rg(a);
        Ok(self.push(
            v,
            Op::Unfold1d {
                src: a,
                kernel,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.rows() != labels.len() {
            return Err(shape_err("cross_entropy", x.shape(), &[labels.len()]));
        }
        let k = x.cols();
        if labels.iter().any(|&l| l >= k) {
            return Err(TensorError::Contract(format!("label out of range for {k} classes")));
        }
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (r, (row, &label)) in x.data().chunks(k).zip(labels).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            loss -= row[label] - m - z.ln();
        }
        let n = labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn accumulate(&mut self, v: Var, contrib: Tensor, kind: OpKind) {
        let contrib = if self.fault == Some(kind) {
            contrib.scale(1.001)
        } else {
            contrib
        };
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => g.add_assign_unchecked(&contrib),
            None => node.grad = Some(contrib),
        }
    }

    /// Back-propagates from a scalar `loss`, populating gradients of every
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let seed = Tensor::full(self.shape(loss), 1.0);
        self.accumulate(loss, seed, OpKind::Leaf);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backward_node(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let kind = self.nodes[i].op.kind();
        // Collect contributions first, then accumulate, so the node borrow ends.
        let mut out: Vec<(Var, Tensor)> = Vec::with_capacity(2);
        {
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let need = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if need(*a) {
                        out.push((*a, g.clone()));
                    }
                    if need(*b) {
                        out.push((*b, g.clone()));
                    }
                }
                Op::Sub(a, b) => {
                    if need(*a) {
                        out.push((*a, g.clone()));
                    }
                    if need(*b) {
                        out.push((*b, g.scale(-1.0)));
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        out.push((*a, g.zip_map(val(*b), |x, y| x * y)?));
                    }
                    if need(*b) {
                        out.push((*b, g.zip_map(val(*a), |x, y| x * y)?));
                    }
                }
                Op::Scale(a, c) => {
                    if need(*a) {
                        out.push((*a, g.scale(*c)));
                    }
                }
                Op::AddBias(a, b) => {
                    if need(*a) {
                        out.push((*a, g.clone()));
                    }
                    if need(*b) {
                        let d = val(*b).len();
                        let mut gb = vec![0.0; d];
                        for row in g.data().chunks(d) {
                            for (acc, x) in gb.iter_mut().zip(row) {
                                *acc += x;
                            }
                        }
                        out.push((*b, Tensor::new(&[d], gb)?));
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if need(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, 1.0, 0.0);
                        out.push((*a, Tensor::new(&[m, k], ga)?));
                    }
                    if need(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, 1.0, 0.0);
                        out.push((*b, Tensor::new(&[k, n], gb)?));
                    }
                }
                Op::Transpose(a) => {
                    if need(*a) {
                        out.push((*a, g.transpose()?));
                    }
                }
                Op::Reshape(a) => {
                    if need(*a) {
                        out.push((*a, g.reshape(val(*a).shape())?));
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = axis_split(g.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let shape = val(p).shape();
                        let len = shape[*axis];
                        if need(p) {
                            let mut data = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let base = o * total * inner + offset * inner;
                                data.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            out.push((p, Tensor::new(shape, data)?));
                        }
                        offset += len;
                    }
                }
                Op::Slice { src, axis, start } => {
                    if need(*src) {
                        let shape = val(*src).shape();
                        let (outer, len, inner) = axis_split(shape, *axis);
                        let width = g.shape()[*axis];
                        let mut data = vec![0.0; numel(shape)];
                        for o in 0..outer {
                            let dst = o * len * inner + start * inner;
                            let srcb = o * width * inner;
                            data[dst..dst + width * inner]
                                .copy_from_slice(&g.data()[srcb..srcb + width * inner]);
                        }
                        out.push((*src, Tensor::new(shape, data)?));
                    }
                }
                Op::Gelu(a) => {
                    if need(*a) {
                        out.push((*a, g.zip_map(val(*a), |gv, x| gv * gelu_grad(x))?));
                    }
                }
                Op::Softmax { src, axis } => {
                    if need(*src) {
                        let y = &node.value;
                        let (outer, len, inner) = axis_split(y.shape(), *axis);
                        let (yd, gd) = (y.data(), g.data());
                        let mut dx = vec![0.0; yd.len()];
                        for o in 0..outer {
                            for j in 0..inner {
                                let idx = |t: usize| o * len * inner + t * inner + j;
                                let dot: f64 = (0..len).map(|t| yd[idx(t)] * gd[idx(t)]).sum();
                                for t in 0..len {
                                    dx[idx(t)] = yd[idx(t)] * (gd[idx(t)] - dot);
                                }
                            }
                        }
                        out.push((*src, Tensor::new(y.shape(), dx)?));
                    }
                }
                Op::LayerNorm { src, inv_std } => {
                    if need(*src) {
                        let y = &node.value;
                        let d = *y.shape().last().unwrap();
                        let mut dx = vec![0.0; y.len()];
                        for (r, inv) in inv_std.iter().enumerate() {
                            let yr = &y.data()[r * d..(r + 1) * d];
                            let gr = &g.data()[r * d..(r + 1) * d];
                            let mg = gr.iter().sum::<f64>() / d as f64;
                            let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for t in 0..d {
                                dx[r * d + t] = inv * (gr[t] - mg - yr[t] * mgy);
                            }
                        }
                        out.push((*src, Tensor::new(y.shape(), dx)?));
                    }
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let c = 2.0 * g.item() / av.len() as f64;
                    let diff = av.zip_map(bv, |x, y| c * (x - y))?;
                    if need(*b) {
                        out.push((*b, diff.scale(-1.0)));
                    }
                    if need(*a) {
                        out.push((*a, diff));
                    }
                }
                Op::Sum(a) => {
                    if need(*a) {
                        out.push((*a, Tensor::full(val(*a).shape(), g.item())));
                    }
                }
                Op::Rotary { src, table } => {
                    if need(*src) {
                        let mut dx = vec![0.0; g.len()];
                        table.apply(g.data(), &mut dx, true);
                        out.push((*src, Tensor::new(g.shape(), dx)?));
                    }
                }
                Op::Unfold1d {
                    src,
                    kernel,
                    stride,
                    pad,
                } => {
                    if need(*src) {
                        let shape = val(*src).shape();
                        let (t_in, c) = (shape[0], shape[1]);
                        let t_out = g.rows();
                        let mut dx = vec![0.0; t_in * c];
                        for t in 0..t_out {
                            for j in 0..*kernel {
                                let s = (t * stride + j) as isize - *pad as isize;
                                if s < 0 || s as usize >= t_in {
                                    continue;
                                }
                                let s = s as usize;
                                let gsrc = &g.data()[t * kernel * c + j * c..][..c];
                                for (acc, x) in dx[s * c..(s + 1) * c].iter_mut().zip(gsrc) {
                                    *acc += x;
                                }
                            }
                        }
                        out.push((*src, Tensor::new(shape, dx)?));
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    if need(*logits) {
                        let shape = val(*logits).shape();
                        let k = shape[1];
                        let c = g.item() / labels.len() as f64;
                        let mut dx: Vec<f64> = probs.iter().map(|p| p * c).collect();
                        for (r, &l) in labels.iter().enumerate() {
                            dx[r * k + l] -= c;
                        }
                        out.push((*logits, Tensor::new(shape, dx)?));
                    }
                }
            }
        }
        for (v, t) in out {
            self.accumulate(v, t, kind);
        }
        Ok(())
    }
}
