use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Compare the tape gradient of scalar `f` at `point` against central
/// differences with step `eps`.
///
/// `f` receives a fresh tape and the leaf holding the (possibly perturbed)
/// point, and must return a scalar. It is evaluated `2 * len + 1` times and
/// must be deterministic.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x)?;
    let analytic = match tape.backward(loss)?.remove(x) {
        Some(g) => g,
        None => Tensor::zeros(point.shape()),
    };

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let loss = f(&mut tape, x)?;
        tape.value(loss).item()
    };
    let mut numeric = vec![0.0; point.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * eps);
    }
    let numeric = Tensor::from_parts(point.shape().to_vec(), numeric);

    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        analytic,
        numeric,
    };
    for (i, (a, n)) in report.analytic.data().iter().zip(report.numeric.data()).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(MAGNITUDE_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
