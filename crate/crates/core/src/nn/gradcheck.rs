//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor of the relative error, per unit of `max(1, |f|)`. Central
/// differences carry roundoff of order `ε·|f|/h`, so gradients far below this
/// floor are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Upper bound on perturbed entries per tensor; larger tensors are strided.
pub const MAX_ENTRIES_PER_TENSOR: usize = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Location and values of the entry with the largest error.
    pub worst: Option<String>,
    /// Set when the check was not run because the input is non-differentiable.
    pub skipped: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.skipped.is_some() || self.max_rel_error <= tol
    }
}

pub type ScalarFn<'a> = dyn Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var> + 'a;

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let stride = len as f64 / max as f64;
    (0..max)
        .map(|k| ((k as f64 * stride) as usize).min(len - 1))
        .collect()
}

fn eval(f: &ScalarFn, store: &ParamStore, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, store, &vars)?;
    Ok(tape.value(out).data()[0])
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic gradients of a scalar function against central differences,
/// over every input tensor and every parameter in `store`.
pub fn grad_check(f: &ScalarFn, inputs: &[Tensor], store: &ParamStore, h: f64) -> Result<GradCheckReport> {
    grad_check_sampled(f, inputs, store, h, MAX_ENTRIES_PER_TENSOR)
}

/// [`grad_check`] perturbing at most `max_entries` evenly strided entries per tensor.
pub fn grad_check_sampled(
    f: &ScalarFn,
    inputs: &[Tensor],
    store: &ParamStore,
    h: f64,
    max_entries: usize,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, store, &vars)?;
    let grads = tape.backward(out);
    let floor = REL_ERROR_FLOOR * tape.value(out).data()[0].abs().max(1.0);
    let mut param_grads = store.clone();
    param_grads.zero_grad();
    tape.accumulate_param_grads(&grads, &mut param_grads);

    let mut max_err = 0.0_f64;
    let mut worst = None;
    let mut checked = 0;
    let mut note = |err: f64, what: String| {
        if err > max_err || worst.is_none() {
            max_err = max_err.max(err);
            worst = Some(what);
        }
    };
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for idx in sample_indices(inputs[k].len(), max_entries) {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let up = eval(f, store, &work)?;
            work[k].data_mut()[idx] = orig - h;
            let down = eval(f, store, &work)?;
            work[k].data_mut()[idx] = orig;
            let a = analytic.data()[idx];
            let numeric = (up - down) / (2.0 * h);
            note(rel_error(a, numeric, floor), format!("input {k}[{idx}]: analytic {a:e}, numeric {numeric:e}"));
            checked += 1;
        }
    }
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut params = store.clone();
    for name in names {
        let len = store.get(&name)?.len();
        let analytic = param_grads.grad_of(&name)?.clone();
        for idx in sample_indices(len, max_entries) {
            let orig = store.get(&name)?.data()[idx];
            params.get_mut(&name)?.data_mut()[idx] = orig + h;
            let up = eval(f, &params, inputs)?;
            params.get_mut(&name)?.data_mut()[idx] = orig - h;
            let down = eval(f, &params, inputs)?;
            params.get_mut(&name)?.data_mut()[idx] = orig;
            let a = analytic.data()[idx];
            let numeric = (up - down) / (2.0 * h);
            note(rel_error(a, numeric, floor), format!("{name}[{idx}]: analytic {a:e}, numeric {numeric:e}"));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        checked,
        worst,
        skipped: None,
    })
}

/// Like [`grad_check`], but returns a skipped report when `guard` flags the inputs
/// as lying on a non-differentiable point.
pub fn grad_check_guarded(
    f: &ScalarFn,
    inputs: &[Tensor],
    store: &ParamStore,
    h: f64,
    max_entries: usize,
    guard: &dyn Fn(&[Tensor]) -> Option<String>,
) -> Result<GradCheckReport> {
    if let Some(reason) = guard(inputs) {
        return Ok(GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            worst: None,
            skipped: Some(reason),
        });
    }
    grad_check_sampled(f, inputs, store, h, max_entries)
}

/// Flags rows whose variance is too small for layer norm to be differentiable at finite `h`.
pub fn layer_norm_degenerate(inputs: &[Tensor]) -> Option<String> {
    let x = inputs.first()?;
    let c = x.cols().max(1);
    for (r, row) in x.data().chunks(c).enumerate() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        if var < 1e-8 {
            return Some(format!("row {r} has (near) zero variance"));
        }
    }
    None
}

/// Reduces a tensor-valued output to a scalar with fixed pseudo-random weights,
/// so every output entry contributes to the checked gradient.
pub fn random_projection(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let wv = tape.leaf(w);
    let prod = tape.mul(y, wv)?;
    Ok(tape.sum(prod))
}

/// Standard-normal-ish random tensor (uniform in [-1, 1]) for test instances.
pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}
