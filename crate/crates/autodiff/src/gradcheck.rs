//! Central finite-difference gradient checking.

use crate::param::{ParamId, ParamStore};

/// Outcome of comparing analytic gradients with finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error among the compared elements.
    pub max_rel_error: f64,
    /// Largest absolute error among all elements.
    pub max_abs_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Central difference `(f(x + eps) - f(x - eps)) / 2eps` for every element of `id`.
pub fn numeric_grad<F>(params: &mut ParamStore, id: ParamId, eps: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&ParamStore) -> f64,
{
    let n = params.get(id).tensor.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = params.get(id).tensor.data()[i];
        params.get_mut(id).tensor.data_mut()[i] = orig + eps;
        let plus = loss(params);
        params.get_mut(id).tensor.data_mut()[i] = orig - eps;
        let minus = loss(params);
        params.get_mut(id).tensor.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    out
}

/// Compares `analytic` against `numeric` element by element.
///
/// Relative error is `|a - n| / max(|a|, |n|)` and is only taken for elements
/// whose analytic magnitude exceeds `min_magnitude`; the rest count as skipped.
pub fn compare(analytic: &[f64], numeric: &[f64], min_magnitude: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        if a.abs() > min_magnitude {
            report.max_rel_error = report.max_rel_error.max(abs / a.abs().max(n.abs()));
            report.checked += 1;
        } else {
            report.skipped += 1;
        }
    }
    report
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}
