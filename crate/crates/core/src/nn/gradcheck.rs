use super::NnError;

/// Relative error used by the gradient checks: `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the analytic gradient returned by `loss_fn` at `params` with
/// fourth-order central differences over every coordinate. Returns the worst relative error.
pub fn finite_difference_check<F>(loss_fn: F, params: &[f64], eps: f64) -> Result<f64, NnError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let all: Vec<usize> = (0..params.len()).collect();
    finite_difference_check_coords(loss_fn, params, eps, &all)
}

/// Same as [`finite_difference_check`] restricted to `coords`.
pub fn finite_difference_check_coords<F>(mut loss_fn: F, params: &[f64], eps: f64, coords: &[usize]) -> Result<f64, NnError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(NnError::InvalidArgument(format!("eps {eps} outside (0, 1e-3]")));
    }
    let (f0, analytic) = loss_fn(params);
    if !f0.is_finite() {
        return Err(NnError::NonFiniteLoss);
    }
    if analytic.len() != params.len() {
        return Err(NnError::ShapeMismatch(format!(
            "gradient has {} entries, params {}",
            analytic.len(),
            params.len()
        )));
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = p[i];
        let mut at = |delta: f64| {
            p[i] = orig + delta;
            loss_fn(&p).0
        };
        let (far_plus, plus, minus, far_minus) = (at(2.0 * eps), at(eps), at(-eps), at(-2.0 * eps));
        p[i] = orig;
        if ![far_plus, plus, minus, far_minus].iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFiniteLoss);
        }
        // five-point stencil: truncation error O(eps^4)
        let numeric = (8.0 * (plus - minus) - (far_plus - far_minus)) / (12.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = [0.3, -1.2, 4.0, 0.0];
        let err = finite_difference_check(|p| (p.iter().map(|x| x * x).sum(), p.iter().map(|x| 2.0 * x).collect()), &p, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn linear_is_exact() {
        let w = [1.5, -2.0, 0.25];
        let err = finite_difference_check(|p| (p.iter().zip(&w).map(|(a, b)| a * b).sum(), w.to_vec()), &[1.0, 2.0, 3.0], 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = finite_difference_check(|p| (p[0] * p[0], vec![p[0]]), &[1.0], 1e-5).unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn rejects_bad_eps_and_nan() {
        assert!(finite_difference_check(|p| (p[0], vec![1.0]), &[1.0], 0.1).is_err());
        assert!(matches!(
            finite_difference_check(|_| (f64::NAN, vec![0.0]), &[1.0], 1e-5),
            Err(NnError::NonFiniteLoss)
        ));
    }
}
