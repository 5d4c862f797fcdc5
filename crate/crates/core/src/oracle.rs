//! Isotropic Gaussian mixture with an exact perturbed score.
//!
//! Under the VP diffusion each component `N(μ_k, s_k² I)` stays Gaussian:
//! `N(α_t μ_k, (α_t² s_k² + σ_t²) I)`, so `∇ log p_t` is available in closed
//! form and stands in for a trained score network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Per-component isotropic variance `s_k²`.
    variances: Vec<f64>,
    dim: usize,
}

/// Mixture parameters of the perturbed marginal `p_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalParams {
    pub weights: Vec<f64>,
    pub means_t: Vec<Vec<f64>>,
    pub vars_t: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if means.len() != k || variances.len() != k {
            return Err(Error::Config(format!(
                "mixture has {k} weights but {} means and {} variances",
                means.len(),
                variances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("mixture means must share a positive dimension".into()));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("mixture means must be finite".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("mixture variances must be positive".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
            dim,
        })
    }

    /// Builds a mixture from per-component standard deviations.
    pub fn with_stds(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: &[f64]) -> Result<Self> {
        Self::new(weights, means, stds.iter().map(|s| s * s).collect())
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::new(vec![1.0], vec![vec![0.0; dim]], vec![1.0]).expect("valid standard normal")
    }

    /// Two equally weighted components at `(±2, 0)` with std 0.1.
    pub fn default_bimodal() -> Self {
        Self::with_stds(
            vec![0.5, 0.5],
            vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            &[0.1, 0.1],
        )
        .expect("valid default mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Mean of the data distribution.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (o, m) in out.iter_mut().zip(mu) {
                *o += w * m;
            }
        }
        out
    }

    pub fn marginal_params(&self, sched: &NoiseSchedule, t: f64) -> Result<MarginalParams> {
        let c = sched.coefficients_at(t)?;
        Ok(MarginalParams {
            weights: self.weights.clone(),
            means_t: self
                .means
                .iter()
                .map(|mu| mu.iter().map(|m| c.alpha * m).collect())
                .collect(),
            vars_t: self
                .variances
                .iter()
                .map(|s2| c.alpha * c.alpha * s2 + c.sigma * c.sigma)
                .collect(),
        })
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape("score", self.dim, x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score input".into()));
        }
        Ok(())
    }

    /// Per-component log-densities `log w_k + log N(x; α μ_k, v_k I)` at time `t`.
    fn component_log_densities(&self, alpha: f64, sigma: f64, x: &[f64]) -> Vec<f64> {
        let d = self.dim as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, mu), s2)| {
                if *w == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let var = alpha * alpha * s2 + sigma * sigma;
                let sq: f64 = x.iter().zip(mu).map(|(xi, m)| (xi - alpha * m).powi(2)).sum();
                w.ln() - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var
            })
            .collect()
    }

    /// Exact `log p_t(x)`.
    pub fn log_density(&self, sched: &NoiseSchedule, x: &[f64], t: f64) -> Result<f64> {
        self.check_point(x)?;
        let c = sched.coefficients_at(t)?;
        Ok(log_sum_exp(&self.component_log_densities(c.alpha, c.sigma, x)))
    }

    /// Posterior component probabilities at `(x, t)`.
    pub fn responsibilities(&self, sched: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let c = sched.coefficients_at(t)?;
        let logs = self.component_log_densities(c.alpha, c.sigma, x);
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        Ok(unnorm.into_iter().map(|u| u / total).collect())
    }

    /// `∇ₓ log p_t(x)`, evaluated at `max(t, t_min)`.
    pub fn score(&self, sched: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let t = t.max(sched.t_min);
        let c = sched.coefficients_at(t)?;
        let resp = self.responsibilities(sched, x, t)?;
        let mut out = vec![0.0; self.dim];
        for ((r, mu), s2) in resp.iter().zip(&self.means).zip(&self.variances) {
            if *r == 0.0 {
                continue;
            }
            let var = c.alpha * c.alpha * s2 + c.sigma * c.sigma;
            for ((o, xi), m) in out.iter_mut().zip(x).zip(mu) {
                *o -= r * (xi - c.alpha * m) / var;
            }
        }
        Ok(out)
    }

    /// Noise prediction `−σ_t ∇ log p_t(x)`.
    pub fn epsilon_hat(&self, sched: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let sigma = sched.sigma(t.max(sched.t_min))?;
        Ok(self.score(sched, x, t)?.into_iter().map(|s| -sigma * s).collect())
    }

    /// `n` i.i.d. draws, row-major `n × d`.
    pub fn sample_data(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let u: f64 = rng.random();
            let k = pick_component(&self.weights, u);
            let s = self.variances[k].sqrt();
            for m in &self.means[k] {
                let z: f64 = rng.sample(StandardNormal);
                out.push(m + s * z);
            }
        }
        out
    }
}

fn pick_component(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (k, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        acc += w;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn standard_normal_marginal_is_invariant() {
        let gm = GaussianMixture::standard_normal(3);
        for t in [0.0, 0.3, 1.0] {
            let p = gm.marginal_params(&sched(), t).unwrap();
            assert!((p.vars_t[0] - 1.0).abs() < 1e-12);
        }
        let x = [0.3, -1.2, 2.0];
        for t in [1e-3, 0.2, 0.9] {
            let s = gm.score(&sched(), &x, t).unwrap();
            for (si, xi) in s.iter().zip(&x) {
                assert!((si + xi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn marginal_at_zero_and_one() {
        let gm = GaussianMixture::with_stds(vec![1.0], vec![vec![10.0, 0.0]], &[1.0]).unwrap();
        let p0 = gm.marginal_params(&sched(), 0.0).unwrap();
        assert_eq!(p0.means_t[0], vec![10.0, 0.0]);
        assert_eq!(p0.vars_t[0], 1.0);
        let a1 = (-5.025f64).exp();
        let p1 = gm.marginal_params(&sched(), 1.0).unwrap();
        assert!((p1.means_t[0][0] - 10.0 * a1).abs() < 1e-14);
        assert!((p1.means_t[0][0] - 6.57e-2).abs() < 1e-4);
        assert!((p1.vars_t[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_mixture_approaches_prior_at_terminal_time() {
        let p = GaussianMixture::default_bimodal().marginal_params(&sched(), 1.0).unwrap();
        for (m, v) in p.means_t.iter().zip(&p.vars_t) {
            // ‖α(1)·(±2, 0)‖ = 2·e^{−5.025} ≈ 0.0131
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 2.0 * (-5.025f64).exp()).abs() < 1e-14);
            assert!(norm < 1.5e-2);
            assert!((v - 1.0).abs() < 1e-2);
            assert!(*v >= sched().sigma(1.0).unwrap().powi(2));
        }
    }

    #[test]
    fn single_gaussian_score_closed_form() {
        let mu = [0.7, -1.5];
        let s2 = 0.25;
        let gm = GaussianMixture::new(vec![1.0], vec![mu.to_vec()], vec![s2]).unwrap();
        let x = [0.1, 0.4];
        for t in [0.01, 0.5, 1.0] {
            let c = sched().coefficients_at(t).unwrap();
            let var = c.alpha * c.alpha * s2 + c.sigma * c.sigma;
            let score = gm.score(&sched(), &x, t).unwrap();
            for i in 0..2 {
                let expected = -(x[i] - c.alpha * mu[i]) / var;
                assert!((score[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_matches_finite_difference_of_log_density() {
        let gm = GaussianMixture::with_stds(
            vec![0.3, 0.7],
            vec![vec![-1.0, 0.5], vec![1.5, -0.2]],
            &[0.4, 0.8],
        )
        .unwrap();
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..100 {
            let t: f64 = rng.random_range(0.01..1.0);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.5..2.5)).collect();
            let score = gm.score(&s, &x, t).unwrap();
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (gm.log_density(&s, &xp, t).unwrap() - gm.log_density(&s, &xm, t).unwrap())
                    / (2.0 * h);
                let denom = score[i].abs().max(1e-3);
                assert!(((fd - score[i]) / denom).abs() < 1e-6, "{fd} vs {}", score[i]);
            }
        }
    }

    #[test]
    fn responsibilities_sum_to_one_even_far_away() {
        let gm = GaussianMixture::default_bimodal();
        for x in [[0.0, 0.0], [40.0, -30.0], [-1e3, 1e3], [2.0, 0.0]] {
            for t in [1e-3, 0.1, 1.0] {
                let r = gm.responsibilities(&sched(), &x, t).unwrap();
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{x:?} {t} {r:?}");
                assert!(gm.score(&sched(), &x, t).unwrap().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let gm = GaussianMixture::default_bimodal();
        assert!(matches!(
            gm.score(&sched(), &[f64::NAN, 0.0], 0.5),
            Err(Error::NonFinite(_))
        ));
        assert!(gm.score(&sched(), &[0.0], 0.5).is_err());
    }

    #[test]
    fn epsilon_hat_relations() {
        let s = sched();
        let gm = GaussianMixture::standard_normal(2);
        let x = [0.5, -2.0];
        let t = 0.4;
        let sigma = s.sigma(t).unwrap();
        let eps = gm.epsilon_hat(&s, &x, t).unwrap();
        for (e, xi) in eps.iter().zip(&x) {
            assert!((e - sigma * xi).abs() < 1e-12);
        }

        let bimodal = GaussianMixture::default_bimodal();
        let eps = bimodal.epsilon_hat(&s, &x, t).unwrap();
        let score = bimodal.score(&s, &x, t).unwrap();
        for (e, sc) in eps.iter().zip(&score) {
            assert_eq!(-e / sigma, *sc);
        }

        // At t_min the prefactor is sigma(t_min) ≈ 0.045.
        let e_min = gm.epsilon_hat(&s, &[1e-6, 0.0], s.t_min).unwrap();
        assert!(e_min[0].abs() < 1e-6 * s.sigma(s.t_min).unwrap() * 1.0001);
    }

    #[test]
    fn sampling_is_deterministic_and_unbiased() {
        let gm = GaussianMixture::with_stds(vec![1.0], vec![vec![3.0, -1.0]], &[0.5]).unwrap();
        assert_eq!(gm.sample_data(50, 3), gm.sample_data(50, 3));
        let n = 100_000;
        let xs = gm.sample_data(n, 9);
        for (i, mu) in [3.0, -1.0].iter().enumerate() {
            let mean = xs.iter().skip(i).step_by(2).sum::<f64>() / n as f64;
            assert!((mean - mu).abs() < 4.0 * 0.5 / (n as f64).sqrt());
        }
    }

    #[test]
    fn degenerate_weights_pick_one_component() {
        let gm = GaussianMixture::with_stds(
            vec![1.0, 0.0],
            vec![vec![-5.0], vec![5.0]],
            &[0.1, 0.1],
        )
        .unwrap();
        assert!(gm.sample_data(1000, 1).iter().all(|x| *x < 0.0));
        let r = gm.responsibilities(&sched(), &[5.0], 0.01).unwrap();
        assert_eq!(r, vec![1.0, 0.0]);
    }

    #[test]
    fn invalid_mixtures_are_rejected() {
        assert!(GaussianMixture::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(GaussianMixture::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 2.0]], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(vec![], vec![], vec![]).is_err());
    }
}
