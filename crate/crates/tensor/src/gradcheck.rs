//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function, so it is independent
//! of every backward closure it validates.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst relative error found by [`check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients of a scalar function against central differences.
///
/// `f` builds the scalar output from leaf variables, one per entry of `inputs`.
/// Relative error per component is `|a - n| / max(|a|, |n|, floor)`; the
/// `floor` keeps near-zero components from dominating.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, floor: f64, f: F) -> GradReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |ins: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut report = GradReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut work = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work[which].data()[i];
            let h = step * orig.abs().max(1.0);
            work[which].data_mut()[i] = orig + h;
            let up = eval(&work);
            work[which].data_mut()[i] = orig - h;
            let down = eval(&work);
            work[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let abs = (numeric - grad[i]).abs();
            let rel = abs / numeric.abs().max(grad[i].abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}
