//! Central finite-difference verification of analytic gradients.

use std::fmt;

/// A scalar objective over a flat parameter vector, with its analytic
/// gradient.
pub trait Differentiable {
    /// Parameter groups in flat order: name and length.
    fn groups(&self) -> Vec<(String, usize)>;
    fn get(&self) -> Vec<f64>;
    fn set(&mut self, flat: &[f64]);
    /// The objective plus a signature of every non-smooth branch taken
    /// (rectifier signs, argmax choices). Coordinates whose perturbation
    /// changes the signature straddle a kink and are skipped.
    fn evaluate(&self) -> (f64, Vec<u32>);
    fn gradient(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "  {:<24} checked {:>4} skipped {:>3} max rel err {:.3e}",
                g.name, g.checked, g.skipped, g.max_rel_error
            )?;
        }
        write!(
            f,
            "  {} (max {:.3e}, tolerance {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance
        )
    }
}

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares every coordinate of the analytic gradient with
/// `(f(θ + ε) - f(θ - ε)) / 2ε`, skipping coordinates where a shift of
/// `10ε` either way crosses a kink.
pub fn gradient_check(problem: &mut dyn Differentiable, epsilon: f64, tolerance: f64) -> GradCheckReport {
    let base = problem.get();
    let analytic = problem.gradient();
    let (_, base_sig) = problem.evaluate();
    assert_eq!(analytic.len(), base.len(), "gradient length mismatch");

    let mut groups = Vec::new();
    let mut offset = 0;
    let mut theta = base.clone();
    for (name, len) in problem.groups() {
        let mut report = GroupReport {
            name,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for i in offset..offset + len {
            let mut at = |delta: f64| {
                theta[i] = base[i] + delta;
                problem.set(&theta);
                let r = problem.evaluate();
                theta[i] = base[i];
                r
            };
            let (_, sig_hi) = at(10.0 * epsilon);
            let (_, sig_lo) = at(-10.0 * epsilon);
            if sig_hi != base_sig || sig_lo != base_sig {
                report.skipped += 1;
                continue;
            }
            let (f_plus, _) = at(epsilon);
            let (f_minus, _) = at(-epsilon);
            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let err = relative_error(analytic[i], numeric);
            report.max_rel_error = if err.is_nan() {
                f64::INFINITY
            } else {
                report.max_rel_error.max(err)
            };
            report.checked += 1;
        }
        offset += len;
        groups.push(report);
    }
    problem.set(&base);
    GradCheckReport {
        groups,
        epsilon,
        tolerance,
    }
}
