//! Central finite-difference gradient checking for double-precision graphs.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::nn::{Ctx, Mode, Module};
use crate::Result;

/// Worst relative error seen across all inputs.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Per input: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub per_input: Vec<f64>,
}

/// Tensor of standard-uniform values in [-1, 1), reproducible from `seed`.
pub fn random_tensor(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// `Σ r ⊙ y` for a fixed random `r`; turns any output into a scalar whose
/// gradient exercises every element.
pub fn weighted_sum<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let r = random_tensor(&y.shape(), seed ^ 0x9e37_79b9_7f4a_7c15);
    y.mul(tape.constant(r)).sum()
}

/// Compares reverse-mode gradients of `f` with central differences of step `h`.
///
/// `f` must rebuild its graph from the supplied variables on every call.
pub fn check_gradients<G>(inputs: &[ArrayD<f64>], h: f64, f: G) -> GradCheckReport
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let eval = |values: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|v| tape.constant(v.clone())).collect();
        f(&tape, &vars).item()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|v| tape.variable(v.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);
    let analytic: Vec<ArrayD<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = ArrayD::zeros(inputs[i].raw_dim());
        for idx in 0..inputs[i].len() {
            let orig = inputs[i].as_slice().expect("standard layout")[idx];
            work[i].as_slice_mut().expect("standard layout")[idx] = orig + h;
            let plus = eval(&work);
            work[i].as_slice_mut().expect("standard layout")[idx] = orig - h;
            let minus = eval(&work);
            work[i].as_slice_mut().expect("standard layout")[idx] = orig;
            numeric.as_slice_mut().expect("standard layout")[idx] = (plus - minus) / (2.0 * h);
        }
        per_input.push(relative_error(a, &numeric));
    }
    GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    }
}

fn relative_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    let diff = (analytic - numeric).mapv(|v| v * v).sum().sqrt();
    let scale = analytic
        .mapv(|v| v * v)
        .sum()
        .sqrt()
        .max(numeric.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Like [`check_gradients`], but also checks every learnable parameter of
/// `module`. Each evaluation runs on a fresh clone, so state a forward pass
/// mutates (running statistics, power-iteration vectors) never leaks
/// between evaluations. `per_input` lists the inputs first, then the
/// parameters in visiting order.
pub fn check_module_gradients<M, G>(module: &M, inputs: &[ArrayD<f64>], mode: Mode, h: f64, f: G) -> Result<GradCheckReport>
where
    M: Module<f64> + Clone,
    G: for<'t> Fn(&mut M, &mut Ctx<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |m: &M, values: &[ArrayD<f64>]| -> Result<f64> {
        let mut m = m.clone();
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, mode, false);
        let vars: Vec<_> = values.iter().map(|v| tape.constant(v.clone())).collect();
        Ok(f(&mut m, &mut ctx, &vars)?.item())
    };

    let mut m = module.clone();
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, mode, true);
    let vars: Vec<_> = inputs.iter().map(|v| tape.variable(v.clone())).collect();
    let out = f(&mut m, &mut ctx, &vars)?;
    let grads = tape.backward(out);
    let param_grads = ctx.collect_grads(&grads);

    let mut per_input = Vec::new();
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let mut numeric = ArrayD::zeros(inputs[i].raw_dim());
        for idx in 0..inputs[i].len() {
            let orig = inputs[i].as_slice().expect("standard layout")[idx];
            work[i].as_slice_mut().expect("standard layout")[idx] = orig + h;
            let plus = eval(module, &work)?;
            work[i].as_slice_mut().expect("standard layout")[idx] = orig - h;
            let minus = eval(module, &work)?;
            work[i].as_slice_mut().expect("standard layout")[idx] = orig;
            numeric.as_slice_mut().expect("standard layout")[idx] = (plus - minus) / (2.0 * h);
        }
        per_input.push(relative_error(&grads.get_or_zeros(v), &numeric));
    }

    let mut names = Vec::new();
    module.visit_params(&mut |p| names.push((p.name.clone(), p.value.raw_dim())));
    for (name, dim) in names {
        let analytic = param_grads.get(&name).cloned().unwrap_or_else(|| ArrayD::zeros(dim.clone()));
        let mut numeric = ArrayD::zeros(dim);
        for idx in 0..numeric.len() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut m = module.clone();
                m.visit_params_mut(&mut |p| {
                    if p.name == name {
                        p.value.as_slice_mut().expect("standard layout")[idx] += delta;
                    }
                });
                eval(&m, inputs)
            };
            let plus = shifted(h)?;
            let minus = shifted(-h)?;
            numeric.as_slice_mut().expect("standard layout")[idx] = (plus - minus) / (2.0 * h);
        }
        per_input.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheckReport {
        max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
    })
}
