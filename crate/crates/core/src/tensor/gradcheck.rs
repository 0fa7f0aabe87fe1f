//! Central-difference gradient verification at 64-bit precision.

use super::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
    /// Set when the function or its gradient produced NaN/Inf anywhere.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        !self.non_finite && self.max_rel_error < tolerance
    }
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences `(f(x+eps·eᵢ) − f(x−eps·eᵢ)) / 2eps`.
pub fn finite_difference_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps)
}

/// Multi-input form of [`finite_difference_check`]: every coordinate of
/// every tensor in `points` is perturbed.
pub fn check_many<F>(f: F, points: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_many_with(f, points, eps, 1.0)
}

/// As [`check_many`], but scales the analytic gradient by `analytic_scale`
/// before comparing. Values other than 1 exist to prove the check can fail.
pub fn check_many_with<F>(f: F, points: &[Tensor<f64>], eps: f64, analytic_scale: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
        non_finite: false,
    };
    if !tape.value(loss).is_finite() {
        report.non_finite = true;
        return Ok(report);
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf grad").iter().map(|g| g * analytic_scale).collect())
        .collect();
    drop(tape);

    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out).unwrap_or(f64::NAN))
    };

    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            report.coordinates += 1;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() || !a.is_finite() {
                report.non_finite = true;
                report.worst = Some((pi, ci));
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
