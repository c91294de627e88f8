//! Central finite-difference checks of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Checks `f` with respect to a single input. See [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}

/// Compares the tape's gradient of the scalar `f(inputs)` against
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / 2eps` for every coordinate of every
/// input. `f` is rebuilt on a fresh tape for each evaluation, so it must be
/// deterministic (seed any dropout inside it).
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_configured(f, inputs, eps, |_| {})
}

/// Like [`grad_check_many`] but lets the caller adjust the tape used for the
/// analytic pass (for example to inject a backward fault).
pub fn grad_check_configured<F, C>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    configure: C,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    C: Fn(&mut Tape),
{
    let mut tape = Tape::new();
    configure(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        coordinates: 0,
    };
    for (which, grads) in analytic.iter().enumerate() {
        for (coord, &analytic) in grads.iter().enumerate() {
            let orig = probe[which].data()[coord];
            probe[which].data_mut()[coord] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[coord] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((which, coord));
                report.worst_values = Some((analytic, numeric));
            }
        }
    }
    Ok(report)
}
