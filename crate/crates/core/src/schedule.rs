//! Variance-preserving noise schedule with a linear `beta(t)`.
//!
//! Every quantity is evaluated in closed form from the integral
//! `B(t) = ∫₀ᵗ β = beta_min·t + (beta_max − beta_min)·t²/(2T)`:
//! `alpha(t) = exp(−B/2)`, `sigma(t)² = 1 − exp(−B)`. The forward SDE has
//! drift `h(t)·x` with `h = −β/2` and diffusion `g = √β`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Time horizon `T`.
    pub t_max: f64,
    /// Clamp for loss weights and score evaluation.
    pub t_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            t_max: 1.0,
            t_min: 1e-3,
        }
    }
}

/// Coefficients of the forward SDE and its marginal at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleCoeffs {
    pub beta: f64,
    pub alpha: f64,
    pub sigma: f64,
    /// Drift factor, `−beta/2`.
    pub h: f64,
    /// Diffusion magnitude, `√beta`.
    pub g: f64,
}

impl NoiseSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_max: f64, t_min: f64) -> Result<Self> {
        let sched = Self {
            beta_min,
            beta_max,
            t_max,
            t_min,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.beta_min, self.beta_max, self.t_max, self.t_min]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("schedule parameters must be finite".into()));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max) {
            return Err(Error::Config(format!(
                "schedule requires 0 < beta_min <= beta_max (got {}, {})",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max) {
            return Err(Error::Config(format!(
                "schedule requires 0 < t_min < t_max (got {}, {})",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    fn check_time(&self, what: &'static str, t: f64) -> Result<()> {
        if t.is_finite() && (0.0..=self.t_max).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain {
                what,
                value: t,
                range: format!("[0, {}]", self.t_max),
            })
        }
    }

    fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min) / self.t_max
    }

    /// `∫₀ᵗ β(τ) dτ`.
    fn beta_integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.t_max
    }

    pub fn coefficients_at(&self, t: f64) -> Result<ScheduleCoeffs> {
        self.check_time("t", t)?;
        let beta = self.beta_unchecked(t);
        let integral = self.beta_integral(t);
        let alpha = (-0.5 * integral).exp();
        // expm1 keeps sigma accurate for tiny t where 1 − alpha² cancels.
        let sigma = (-(-integral).exp_m1()).sqrt();
        Ok(ScheduleCoeffs {
            beta,
            alpha,
            sigma,
            h: -0.5 * beta,
            g: beta.sqrt(),
        })
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_time("t", t)?;
        Ok((-0.5 * self.beta_integral(t)).exp())
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_time("t", t)?;
        Ok((-(-self.beta_integral(t)).exp_m1()).sqrt())
    }

    /// `φ(t, s) = exp(∫ₛᵗ h) = alpha(t) / alpha(s)`.
    pub fn phi(&self, t: f64, s: f64) -> Result<f64> {
        self.check_time("t", t)?;
        self.check_time("s", s)?;
        Ok((-0.5 * (self.beta_integral(t) - self.beta_integral(s))).exp())
    }

    /// Square-root-SNR weight `alpha(t)/sigma(t)`, with `t` clamped to at
    /// least `t_min`.
    pub fn loss_weight(&self, t: f64) -> Result<f64> {
        self.check_time("t", t.max(self.t_min))?;
        let t = t.max(self.t_min);
        if t <= 0.0 {
            return Err(Error::Domain {
                what: "loss weight time",
                value: t,
                range: "(0, T]".into(),
            });
        }
        let c = self.coefficients_at(t)?;
        Ok(c.alpha / c.sigma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn zero_time_identity() {
        let c = sched().coefficients_at(0.0).unwrap();
        assert_eq!(c.alpha, 1.0);
        assert_eq!(c.sigma, 0.0);
        assert!((c.beta - 0.1).abs() < 1e-15);
    }

    #[test]
    fn terminal_time_matches_closed_form_integral() {
        // ∫₀¹ (0.1 + 19.9 t) dt = 0.1 + 9.95 = 10.05
        let c = sched().coefficients_at(1.0).unwrap();
        let expected = (-10.05f64 / 2.0).exp();
        assert!((c.alpha - expected).abs() < 1e-15);
        assert!((c.alpha - 6.57e-3).abs() < 1e-5);
        assert!((c.g * c.g - c.beta).abs() < 1e-12);
        assert!((c.h + 0.5 * c.beta).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_time_is_domain_error() {
        assert!(matches!(sched().coefficients_at(-0.1), Err(Error::Domain { .. })));
        assert!(matches!(sched().coefficients_at(1.5), Err(Error::Domain { .. })));
        assert!(sched().coefficients_at(f64::NAN).is_err());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(NoiseSchedule::new(0.0, 20.0, 1.0, 1e-3).is_err());
        assert!(NoiseSchedule::new(5.0, 1.0, 1.0, 1e-3).is_err());
        assert!(NoiseSchedule::new(0.1, 20.0, 1.0, 1.0).is_err());
        assert!(NoiseSchedule::new(0.1, 20.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn phi_examples() {
        let s = sched();
        assert_eq!(s.phi(0.4, 0.4).unwrap(), 1.0);
        let expected = (10.05f64 / 2.0).exp();
        assert!((s.phi(0.0, 1.0).unwrap() - expected).abs() < 1e-10);
        assert!((s.phi(0.0, 1.0).unwrap() - 1.0 / s.alpha(1.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn loss_weight_examples() {
        let s = sched();
        // alpha = sigma where B(t) = ln 2: 9.95 t² + 0.1 t − ln 2 = 0
        let t_eq = (-0.1 + (0.01f64 + 4.0 * 9.95 * std::f64::consts::LN_2).sqrt()) / (2.0 * 9.95);
        assert!((s.loss_weight(t_eq).unwrap() - 1.0).abs() < 1e-12);

        let c1 = s.coefficients_at(1.0).unwrap();
        let w1 = s.loss_weight(1.0).unwrap();
        assert!((w1 - c1.alpha / c1.sigma).abs() < 1e-15);
        assert!((w1 - 6.57e-3).abs() < 1e-5);

        assert_eq!(s.loss_weight(1e-5).unwrap(), s.loss_weight(s.t_min).unwrap());
        assert_eq!(s.loss_weight(0.0).unwrap(), s.loss_weight(s.t_min).unwrap());
        assert!(s.loss_weight(2.0).is_err());
    }

    #[test]
    fn normalization_on_many_times() {
        let s = sched();
        for i in 0..10_000 {
            let t = i as f64 / 9_999.0;
            let c = s.coefficients_at(t).unwrap();
            assert!((c.alpha * c.alpha + c.sigma * c.sigma - 1.0).abs() <= 1e-12, "t = {t}");
        }
    }

    #[test]
    fn alpha_decreasing_sigma_increasing() {
        let s = sched();
        let mut prev = s.coefficients_at(0.0).unwrap();
        for i in 1..=2000 {
            let c = s.coefficients_at(i as f64 / 2000.0).unwrap();
            assert!(c.alpha < prev.alpha);
            assert!(c.sigma > prev.sigma);
            prev = c;
        }
    }

    #[test]
    fn alpha_derivative_is_semilinear() {
        let s = sched();
        let eps = 1e-6;
        for i in 1..100 {
            let t = i as f64 / 100.0;
            let fd = (s.alpha(t + eps).unwrap() - s.alpha(t - eps).unwrap()) / (2.0 * eps);
            let c = s.coefficients_at(t).unwrap();
            let exact = c.h * c.alpha;
            assert!(((fd - exact) / exact).abs() < 1e-6, "t = {t}: {fd} vs {exact}");
        }
    }

    proptest! {
        #[test]
        fn phi_cocycle(a in 0.0..1.0f64, b in 0.0..1.0f64, c in 0.0..1.0f64) {
            let s = sched();
            let lhs = s.phi(a, b).unwrap() * s.phi(b, c).unwrap();
            let rhs = s.phi(a, c).unwrap();
            prop_assert!(((lhs - rhs) / rhs).abs() < 1e-10);
            let inv = s.phi(a, b).unwrap() * s.phi(b, a).unwrap();
            prop_assert!((inv - 1.0).abs() < 1e-12);
        }

        #[test]
        fn coefficients_normalized(t in 0.0..=1.0f64) {
            let c = sched().coefficients_at(t).unwrap();
            prop_assert!((c.alpha * c.alpha + c.sigma * c.sigma - 1.0).abs() <= 1e-12);
            prop_assert!((c.g * c.g - c.beta).abs() <= 1e-12);
        }
    }
}
