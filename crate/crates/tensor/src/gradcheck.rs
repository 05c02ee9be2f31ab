//! Central-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for a
/// scalar-valued graph of one input.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), h, 1)
}

/// Same as [`grad_check`] over several inputs, probing every `stride`-th
/// coordinate of each.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64, stride: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(Tape::new, f, inputs, h, stride)
}

/// [`grad_check_many`] with a caller-supplied tape constructor, used to run
/// the check against a tape with an injected fault.
pub fn grad_check_with<F, T>(
    make_tape: T,
    f: F,
    inputs: &[Tensor],
    h: f64,
    stride: usize,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    T: Fn() -> Tape,
{
    assert!(h > 0.0 && h <= 1e-3, "step must lie in (0, 1e-3]");
    let stride = stride.max(1);
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = make_tape();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        for j in (0..x.len()).step_by(stride) {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[i].data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
