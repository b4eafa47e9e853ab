//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest relative gap between central differences at `h` and `h/2`.
    /// Large values mean the stencil straddles a kink, a jump, or strong
    /// curvature, so the numeric reference itself is unreliable.
    pub max_stencil_drift: f64,
    pub elements: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    /// Whether the numeric reference is converged to within `tol`.
    pub fn reference_is_smooth(&self, tol: f64) -> bool {
        self.max_stencil_drift <= tol
    }
}

/// Relative error with an absolute floor on the denominator, so entries
/// whose true gradient is ~0 are judged on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of a scalar function against central differences
/// with step `h`, perturbing every element of every input. Each element is
/// also differenced at `h/2` to measure how trustworthy the reference is.
///
/// `f` receives a fresh tape and one leaf per input (all tracked) and must
/// return a scalar.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], h: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        max_stencil_drift: 0.0,
        elements: 0,
    };
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            let mut central = |step: f64| -> Result<f64> {
                work[i].data_mut()[j] = orig + step;
                let up = eval(&work)?;
                work[i].data_mut()[j] = orig - step;
                let down = eval(&work)?;
                work[i].data_mut()[j] = orig;
                Ok((up - down) / (2.0 * step))
            };
            let numeric = central(h)?;
            let half = central(h / 2.0)?;
            if !numeric.is_finite() || !half.is_finite() {
                return Err(Error::NonFinite { op: "gradcheck" });
            }
            report.max_stencil_drift = report.max_stencil_drift.max(relative_error(numeric, half, floor));
            report.max_abs_err = report.max_abs_err.max((grads[j] - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(grads[j], numeric, floor));
            report.elements += 1;
        }
    }
    Ok(report)
}
