//! Central finite-difference gradient checking.

use std::fmt;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max rel err {:.3e} at #{} (analytic {:.6e}, numeric {:.6e}) over {} coords, tol {:.1e}: {}",
            self.max_rel_error,
            self.worst_index,
            self.analytic_at_worst,
            self.numeric_at_worst,
            self.coordinates,
            self.tolerance,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate. `params` is
/// restored to its original values before returning.
pub fn numerical_gradient<F>(params: &mut [f64], mut f: F, h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let plus = f(params);
        params[i] = orig - h;
        let minus = f(params);
        params[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(params: &mut [f64], f: F, analytic: &[f64], h: f64, tol: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient length");
    let numeric = numerical_gradient(params, f, h);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
        numeric_at_worst: numeric.first().copied().unwrap_or(0.0),
        coordinates: params.len(),
        tolerance: tol,
        passed: true,
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        // NaN compares false, so route it explicitly into the failure path.
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    report.passed = report.max_rel_error <= tol;
    report
}
