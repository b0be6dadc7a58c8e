//! Central finite-difference checking of analytic gradients.
//!
//! The check only ever evaluates the forward pass, so it is independent of
//! the adjoint code it verifies.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Largest elementwise discrepancy found by [`check`].
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h`, visiting at most `max_per_input` elements of
/// each input (evenly strided) to bound cost on large tensors.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, max_per_input: usize, f: F) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report =
        GradReport { max_rel_err: 0.0, worst_input: 0, worst_element: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let numel = inputs[which].numel();
        let stride = numel.div_ceil(max_per_input.max(1)).max(1);
        let zero = Tensor::zeros(inputs[which].shape().to_vec());
        let analytic = grads.get(*var).unwrap_or(&zero);
        for e in (0..numel).step_by(stride) {
            let orig = work[which].data()[e];
            work[which].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let err = rel_err(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report = GradReport {
                    max_rel_err: err,
                    worst_input: which,
                    worst_element: e,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
