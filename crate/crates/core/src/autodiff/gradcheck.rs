//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so the check is independent of the
//! backward rules it audits.

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Outcome of a gradient check over every element of every input.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Input index and flat element index of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Per-input maximum relative error.
    pub per_input: Vec<f64>,
    pub checked: usize,
}

/// Denominator floor for the relative error, so that entries whose true
/// gradient is zero compare on absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences with step `eps`.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        per_input: vec![0.0; inputs.len()],
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti][j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            report.per_input[ti] = report.per_input[ti].max(err);
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (ti, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
