//! Finite-difference gradient oracle shared by the integration tests.
#![allow(dead_code)]

use omnimol_core::tensor::{Binder, Tape, Tensor, Var};
use omnimol_core::Result;

pub const FD_STEP: f64 = 1e-5;

/// Relative error; magnitudes below 1e-4 compare absolutely, which keeps
/// central-difference rounding noise on exactly-zero gradients in range.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Fixed, irregular projection weights that turn any output into a scalar.
pub fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662).sin() + 0.1).collect()
}

fn scalar_loss(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let w = probe_weights(tape.value(out).len());
    let loss = tape.weighted_sum(out, &w)?;
    Ok((tape, vars, loss))
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `Σ w·f(inputs)` over every input element.
pub fn max_grad_error(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let (mut tape, vars, loss) = scalar_loss(inputs, f).expect("forward");
    tape.backward(loss).expect("backward");
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] += delta;
                let (t, _, l) = scalar_loss(&moved, f).expect("forward");
                t.scalar(l)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 * 1.318 + seed as f64 * 2.71).sin()) * 0.9).collect();
    Tensor::new(shape.to_vec(), data).expect("shape").with_requires_grad(true)
}

/// Largest relative error over parameters of a module that binds its own
/// tensors. `get`/`get_mut` address parameter `k` of `n_params`; at most
/// `per_param` entries of each are probed.
pub fn module_grad_error<M: Clone>(
    module: &M,
    n_params: usize,
    get: &dyn Fn(&M, usize) -> &Tensor,
    get_mut: &dyn Fn(&mut M, usize) -> &mut Tensor,
    loss: &dyn Fn(&M, &mut Tape, &mut Binder) -> Var,
    per_param: usize,
) -> f64 {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let l = loss(module, &mut tape, &mut binder);
    tape.backward(l).expect("backward");
    let mut worst = 0.0f64;
    for k in 0..n_params {
        let t = get(module, k);
        let analytic = binder.get(t).and_then(|v| tape.grad(v)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        let stride = (t.len() / per_param.max(1)).max(1);
        for j in (0..t.len()).step_by(stride) {
            let eval = |delta: f64| {
                let mut m = module.clone();
                get_mut(&mut m, k).data_mut()[j] += delta;
                let mut tape = Tape::new();
                let mut binder = Binder::new();
                let l = loss(&m, &mut tape, &mut binder);
                tape.scalar(l)
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}
