use crate::error::{Error, Result};

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
    pub max_rel_error: f64,
    /// Coordinate where the maximum occurred.
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares `analytic` against central differences of `f` around `point`.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    point: &[f64],
    eps: f64,
) -> Result<GradCheck> {
    if analytic.len() != point.len() {
        return Err(Error::shape("finite_diff_check", &[analytic.len()], &[point.len()]));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("eps must be positive, got {eps}"),
        ));
    }
    let mut x = point.to_vec();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        coordinates: point.len(),
    };
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x)?;
        x[i] = orig - eps;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(
                "finite_diff_check",
                format!("non-finite evaluation at coordinate {i}"),
            ));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > out.max_rel_error || err.is_nan() {
            out.max_rel_error = err;
            out.worst_index = i;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear_maps() {
        let w = [0.5, -2.0, 3.25];
        let f = |x: &[f64]| Ok(x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 1.0);
        let r = finite_diff_check(f, &w, &[0.3, -0.7, 1.9], 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn reports_wrong_gradient() {
        let f = |x: &[f64]| Ok(x[0] * x[0]);
        let r = finite_diff_check(f, &[0.0], &[1.0], 1e-5).unwrap();
        assert!((r.max_rel_error - 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let f = |x: &[f64]| Ok(x[0].ln());
        let err = finite_diff_check(f, &[0.0], &[0.0], 1e-5).unwrap_err();
        assert!(err.is_numeric());
    }
}
