//! Central finite-difference gradient checking.
//!
//! Used by the test suites and the `selftest` command to validate every
//! backward rule against an independent numerical estimate. The check
//! re-evaluates the forward function only, so it shares no code with the
//! reverse sweep it verifies.

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with an absolute floor so near-zero gradients compare
/// on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compare an analytic gradient against central differences of `f`.
///
/// `f` maps flat parameter values to a scalar; `params` is the evaluation
/// point and `analytic` the gradient under test, both of the same length.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    step: f64,
) -> GradCheck {
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut work = params.to_vec();
    let mut worst = GradCheck { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for i in 0..params.len() {
        let x = params[i];
        work[i] = x + step;
        let fp = f(&work);
        work[i] = x - step;
        let fm = f(&work);
        work[i] = x;
        let numeric = (fp - fm) / (2.0 * step);
        let err = rel_err(analytic[i], numeric);
        if err > worst.max_rel_err {
            worst = GradCheck { max_rel_err: err, worst_index: i, analytic: analytic[i], numeric };
        }
    }
    worst
}

/// Panicking convenience wrapper for tests.
pub fn assert_gradient(
    f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    tol: f64,
    what: &str,
) {
    let r = check_gradient(f, params, analytic, step);
    assert!(
        r.max_rel_err < tol,
        "{what}: gradient mismatch at index {} (analytic {:.12e}, numeric {:.12e}, rel err {:.3e} >= {tol:.1e})",
        r.worst_index,
        r.analytic,
        r.numeric,
        r.max_rel_err
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let p = [1.0, -2.0, 0.5];
        let g = [2.0, -4.0, 1.0];
        let r = check_gradient(f, &p, &g, 1e-6);
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_detected() {
        let f = |x: &[f64]| x[0] * x[0];
        let r = check_gradient(f, &[3.0], &[5.0], 1e-6);
        assert!(r.max_rel_err > 0.1);
    }
}
