use crate::error::{Error, Result};

/// Central-difference gradient check settings.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Lower bound on the relative-error denominator, so coordinates with
    /// near-zero gradient are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
        }
    }
}

/// Compares the analytic gradient returned by `f` at `params` against central
/// differences of its value, returning the maximum relative error
/// `|g − ĝ| / max(|g|, |ĝ|, floor)` over all coordinates.
pub fn grad_check<F>(f: F, params: &[f64], cfg: GradCheck) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + cfg.step;
        let plus = f(&probe)?.0;
        probe[i] = orig - cfg.step;
        let minus = f(&probe)?.0;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!("grad_check coordinate {i}")));
        }
        let denom = analytic[i].abs().max(numeric.abs()).max(cfg.floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()));
        let x = [0.3, -1.7, 2.2, 0.0, 5.5];
        assert!(grad_check(f, &x, GradCheck::default()).unwrap() < 1e-9);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let f = |x: &[f64]| {
            let mut g: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
            g[1] *= 1.01;
            Ok((x.iter().map(|v| v.powi(3)).sum(), g))
        };
        assert!(grad_check(f, &[0.5, 1.2, -0.7], GradCheck::default()).unwrap() > 1e-3);
    }

    #[test]
    fn non_finite_objective_errors() {
        let f = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(grad_check(f, &[1.0], GradCheck::default()).is_err());
    }
}
