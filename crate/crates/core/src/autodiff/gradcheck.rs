//! Central finite-difference gradient checking at 64-bit precision.

use super::{Graph, GraphError, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`,
    /// where the floor is [`REL_FLOOR`] times `max(1, |f|)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Number of scalar coordinates checked.
    pub checked: usize,
    /// Coordinates whose step had to shrink to stay on one smooth piece.
    pub reduced: usize,
    /// Coordinates left out because every step straddled a kink.
    pub skipped: usize,
    pub tol: f64,
}

impl GradReport {
    pub fn new(tol: f64) -> Self {
        Self { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, reduced: 0, skipped: 0, tol }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    /// Folds one coordinate into the report.
    pub fn record(&mut self, analytic: f64, diff: Difference) {
        match diff {
            Difference::Skipped => self.skipped += 1,
            Difference::Value { d, reduced, scale } => {
                let abs = (analytic - d).abs();
                let rel = abs / analytic.abs().max(d.abs()).max(REL_FLOOR * scale.max(1.0));
                self.max_abs_err = self.max_abs_err.max(abs);
                self.max_rel_err = self.max_rel_err.max(if rel.is_nan() { f64::INFINITY } else { rel });
                self.checked += 1;
                self.reduced += usize::from(reduced);
            }
        }
    }
}

/// Outcome of one central difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Difference {
    /// `scale` is the larger magnitude of the two probe values.
    Value { d: f64, reduced: bool, scale: f64 },
    Skipped,
}

/// Step reductions tried when a difference straddles a kink.
const MAX_REDUCTIONS: u32 = 3;

/// Central difference at `x0` with step `1e-4 · max(1, |x0|)`.
///
/// `eval(x)` returns the function value and the branch signature of the
/// forward pass. When either probe lands on a different smooth piece than
/// `x0` (signature differs from `sig0`), the step shrinks tenfold, up to
/// three times, after which the coordinate is skipped.
pub fn central_difference<E>(
    x0: f64,
    sig0: u64,
    mut eval: impl FnMut(f64) -> Result<(f64, u64), E>,
) -> Result<Difference, E> {
    let mut h = 1e-4 * x0.abs().max(1.0);
    for attempt in 0..=MAX_REDUCTIONS {
        let (fp, sp) = eval(x0 + h)?;
        let (fm, sm) = eval(x0 - h)?;
        if sp == sig0 && sm == sig0 {
            return Ok(Difference::Value { d: (fp - fm) / (2.0 * h), reduced: attempt > 0, scale: fp.abs().max(fm.abs()) });
        }
        h /= 10.0;
    }
    Ok(Difference::Skipped)
}

/// Denominator floor of the relative error per unit of function
/// magnitude, so coordinates whose true gradient vanishes are judged by
/// absolute error against the roundoff the difference can resolve.
pub const REL_FLOOR: f64 = 1e-6;

/// Checks the gradient of the scalar `f(inputs)` with respect to every
/// coordinate of every input.
pub fn grad_check<F>(f: F, points: &[Tensor<f64>], tol: f64) -> Result<GradReport, GraphError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GraphError>,
{
    grad_check_with_fault(f, points, tol, None)
}

/// As [`grad_check`], with the backward rule of op `fault` sign-flipped in
/// the analytic pass.
pub fn grad_check_with_fault<F>(f: F, points: &[Tensor<f64>], tol: f64, fault: Option<&str>) -> Result<GradReport, GraphError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GraphError>,
{
    let mut g = Graph::new().with_finite_checks(true);
    if let Some(op) = fault {
        g = g.with_fault(op);
    }
    let vars: Vec<Var> = points.iter().map(|p| g.input(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let sig0 = g.branch_signature();

    let eval = |pts: &[Tensor<f64>]| -> Result<(f64, u64), GraphError> {
        let mut g = Graph::new().with_finite_checks(false);
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let r = f(&mut g, &vars)?;
        Ok((g.scalar(r), g.branch_signature()))
    };

    let mut pts = points.to_vec();
    let mut report = GradReport::new(tol);
    for (j, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; points[j].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let x = points[j].data()[i];
            let d = central_difference(x, sig0, |xi| {
                pts[j].data_mut()[i] = xi;
                eval(&pts)
            })?;
            pts[j].data_mut()[i] = x;
            report.record(a, d);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point() -> Tensor<f64> {
        Tensor::new(vec![5], vec![0.3, -1.2, 2.5, 0.01, -0.7]).unwrap()
    }

    #[test]
    fn sum_of_squares_passes_tight() {
        let r = grad_check(
            |g, v| {
                let s = g.square(v[0])?;
                g.sum(s)
            },
            &[point()],
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn floor_follows_function_magnitude() {
        let mut r = GradReport::new(1e-3);
        r.record(0.0, Difference::Value { d: 5e-8, reduced: false, scale: 1e3 });
        assert!(r.passed(), "{r:?}");
        r.record(0.0, Difference::Value { d: 5e-8, reduced: false, scale: 1.0 });
        assert!(!r.passed());
    }

    #[test]
    fn wrong_rule_fails() {
        // forward x², backward claims 4x
        let r = grad_check(
            |g, v| {
                let s = g.map_unary(v[0], |x| x * x, |x, _, d| x.iter().zip(d).map(|(x, d)| 4.0 * x * d).collect())?;
                g.sum(s)
            },
            &[point()],
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn injected_fault_fails() {
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.sigmoid(v[0])?;
            g.sum(s)
        };
        assert!(grad_check(f, &[point()], 1e-4).unwrap().passed());
        assert!(!grad_check_with_fault(f, &[point()], 1e-4, Some("sigmoid")).unwrap().passed());
    }
}
