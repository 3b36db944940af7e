//! Central finite-difference gradient verification.

/// Gradient entries smaller than this are compared on an absolute scale.
pub const GRAD_ABS_FLOOR: f64 = 1e-2;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst per-coordinate error.
    pub max_error: f64,
    /// Coordinate attaining it.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the gradient returned by `loss` against central differences.
///
/// `loss` returns `(value, gradient)`. The step for coordinate `i` is
/// `step * max(1, |x_i|)`. Per coordinate the error is
/// `|g - g_fd| / max(|g|, |g_fd|, GRAD_ABS_FLOOR)`. A non-finite loss at a
/// perturbed point yields an infinite error.
pub fn grad_check<F>(mut loss: F, point: &[f64], step: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, grad) = loss(point);
    assert_eq!(grad.len(), point.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        let orig = x[i];
        x[i] = orig + h;
        let (up, _) = loss(&x);
        x[i] = orig - h;
        let (down, _) = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = if numeric.is_finite() && grad[i].is_finite() {
            let scale = grad[i].abs().max(numeric.abs()).max(GRAD_ABS_FLOOR);
            (grad[i] - numeric).abs() / scale
        } else {
            f64::INFINITY
        };
        if err > report.max_error || (i == 0 && err == 0.0) {
            report = GradCheckReport {
                max_error: err,
                worst_index: i,
                analytic: grad[i],
                numeric,
            };
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let point = [0.3, -1.7, 2.5, 10.0];
        let r = grad_check(
            |x| (0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec()),
            &point,
            1e-5,
        );
        assert!(r.max_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let r = grad_check(|x| (4.0, vec![0.0; x.len()]), &[1.0, 2.0], 1e-5);
        assert_eq!(r.max_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let r = grad_check(|x| (x[0] * x[0], vec![x[0]]), &[1.0], 1e-5);
        assert!(r.max_error > 0.4);
    }

    #[test]
    fn non_finite_loss_fails() {
        let r = grad_check(|x| ((x[0]).ln(), vec![1.0 / x[0]]), &[0.0], 1e-5);
        assert!(r.max_error.is_infinite());
    }
}
