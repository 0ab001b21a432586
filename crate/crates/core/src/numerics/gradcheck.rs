//! Central finite differences, used to check analytic gradients.

use super::{DiffArray, Tape, Var};
use crate::error::Result;
use crate::params::{Bindings, ParamId, ParamStore};

/// Default step for central differences in 64-bit.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this in magnitude are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for one coordinate of a flat point.
pub fn central_difference<E>(
    mut f: impl FnMut(&[f64]) -> std::result::Result<f64, E>,
    x: &[f64],
    index: usize,
    step: f64,
) -> std::result::Result<f64, E> {
    let mut probe = x.to_vec();
    probe[index] = x[index] + step;
    let plus = f(&probe)?;
    probe[index] = x[index] - step;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * step))
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

impl GradCheckReport {
    pub fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_relative_error = self
            .max_relative_error
            .max(relative_error(analytic, numeric));
        self.max_absolute_error = self.max_absolute_error.max((analytic - numeric).abs());
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tolerance
    }
}

/// Checks every input element of a scalar-valued tape program.
///
/// `build` receives a tape and one leaf per input and must return a scalar.
/// The analytic side runs one backward pass; the numeric side re-runs `build`
/// on gradient-free tapes with single coordinates perturbed.
pub fn check_program(
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[DiffArray<f64>],
    step: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, a)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; a.len()])
        })
        .collect();

    let mut report = GradCheckReport::default();
    for (which, input) in inputs.iter().enumerate() {
        for index in 0..input.len() {
            let numeric = central_difference(
                |x| -> Result<f64> {
                    let mut t = Tape::no_grad();
                    let leaves: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, a)| {
                            if k == which {
                                t.constant(DiffArray::new(a.shape().to_vec(), x.to_vec()).unwrap())
                            } else {
                                t.constant(a.clone())
                            }
                        })
                        .collect();
                    let out = build(&mut t, &leaves)?;
                    t.value(out).item()
                },
                input.data(),
                index,
                step,
            )?;
            report.record(analytic[which][index], numeric);
        }
    }
    Ok(report)
}

/// Checks `samples` randomly chosen scalars of a parameter store against
/// central differences. `build` maps bound parameters to a scalar loss and
/// is re-run on gradient-free tapes for the numeric side.
pub fn check_params<R: rand::Rng + ?Sized>(
    store: &mut ParamStore<f64>,
    build: impl Fn(&mut Tape<f64>, &Bindings) -> Result<Var>,
    samples: usize,
    step: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = build(&mut tape, &bound)?;
    tape.backward(loss)?;

    let total = store.scalar_count();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut report = GradCheckReport::default();
    for flat in rand::seq::index::sample(rng, total, samples.min(total)) {
        let (id, index) = locate(store, &ids, flat);
        let analytic = tape.grad(bound.var(id)).map_or(0.0, |g| g[index]);
        let original = store.scalar(id, index);
        let mut eval = |x: f64| -> Result<f64> {
            store.set_scalar(id, index, x);
            let mut t = Tape::no_grad();
            let b = store.bind(&mut t);
            let out = build(&mut t, &b)?;
            t.value(out).item()
        };
        let plus = eval(original + step)?;
        let minus = eval(original - step)?;
        store.set_scalar(id, index, original);
        report.record(analytic, (plus - minus) / (2.0 * step));
    }
    Ok(report)
}

fn locate(store: &ParamStore<f64>, ids: &[ParamId], mut flat: usize) -> (ParamId, usize) {
    for &id in ids {
        let n = store.get(id).len();
        if flat < n {
            return (id, flat);
        }
        flat -= n;
    }
    unreachable!("flat index within scalar count")
}
