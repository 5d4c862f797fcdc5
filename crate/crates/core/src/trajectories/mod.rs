//! Probability-flow ODE integration and trajectory recording.
//!
//! Time runs backwards from `T` to the grid times. All solvers are pure
//! functions of their inputs.

mod dataset;

pub use dataset::{generate_dataset, record_noise, DatasetHeader, TrajectoryDataset, DATASET_MAGIC, DATASET_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::GaussianMixture;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridScheme {
    Uniform,
    Quadratic,
    /// Times supplied explicitly, e.g. read back from a dataset header.
    Custom,
}

/// Strictly decreasing supervision times in `(0, s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    scheme: GridScheme,
}

impl TimeGrid {
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        Self::with_scheme(times, GridScheme::Custom)
    }

    fn with_scheme(times: Vec<f64>, scheme: GridScheme) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Config("time grid needs at least one time".into()));
        }
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Config("time grid entries must be positive and finite".into()));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("time grid must be strictly decreasing".into()));
        }
        Ok(Self { times, scheme })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn scheme(&self) -> GridScheme {
        self.scheme
    }

    /// Largest (first) time.
    pub fn start(&self) -> f64 {
        self.times[0]
    }

    /// Smallest (last) time; the trajectory endpoint.
    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }
}

/// `t_m = t_floor + (s − t_floor)·w(m/M)` for `m = M, …, 1`, with `w` the
/// identity (uniform) or the square (quadratic, denser near zero).
pub fn make_time_grid(m: usize, scheme: GridScheme, s: f64, t_floor: f64) -> Result<TimeGrid> {
    if m == 0 {
        return Err(Error::Config("time grid resolution M must be at least 1".into()));
    }
    if !(t_floor > 0.0 && t_floor < s && s.is_finite()) {
        return Err(Error::Config(format!(
            "time grid requires 0 < t_floor < s (got t_floor = {t_floor}, s = {s})"
        )));
    }
    let warp: fn(f64) -> f64 = match scheme {
        GridScheme::Uniform => |u| u,
        GridScheme::Quadratic => |u| u * u,
        GridScheme::Custom => {
            return Err(Error::Config("custom grids are built with TimeGrid::from_times".into()))
        }
    };
    let times = (1..=m)
        .rev()
        .map(|i| t_floor + (s - t_floor) * warp(i as f64 / m as f64))
        .collect();
    TimeGrid::with_scheme(times, scheme)
}

/// One recorded probability-flow trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x_t: Vec<f64>,
    /// Row-major `M × d`; row `m` is the state at `grid.times()[m]`.
    pub values: Vec<f64>,
    pub grid: TimeGrid,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.x_t.len()
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let d = self.dim();
        &self.values[m * d..(m + 1) * d]
    }

    pub fn endpoint(&self) -> &[f64] {
        self.row(self.grid.len() - 1)
    }
}

/// `h(t)·x − ½ g(t)² ∇ log p_t(x)`.
pub fn pf_rhs(gm: &GaussianMixture, sched: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let c = sched.coefficients_at(t.max(sched.t_min))?;
    let score = gm.score(sched, x, t)?;
    Ok(x
        .iter()
        .zip(&score)
        .map(|(xi, si)| c.h * xi - 0.5 * c.g * c.g * si)
        .collect())
}

pub fn step_euler<F>(rhs: F, x: &[f64], t: f64, t_next: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let dt = t_next - t;
    let k = rhs(x, t)?;
    Ok(x.iter().zip(&k).map(|(xi, ki)| xi + dt * ki).collect())
}

/// Explicit trapezoidal (Heun) step.
pub fn step_heun<F>(rhs: F, x: &[f64], t: f64, t_next: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let dt = t_next - t;
    let k1 = rhs(x, t)?;
    let pred: Vec<f64> = x.iter().zip(&k1).map(|(xi, ki)| xi + dt * ki).collect();
    let k2 = rhs(&pred, t_next)?;
    Ok(x
        .iter()
        .zip(k1.iter().zip(&k2))
        .map(|(xi, (a, b))| xi + 0.5 * dt * (a + b))
        .collect())
}

/// Exponential-integrator step with the noise prediction frozen at `(x, t)`:
/// `x' = (α'/α)·x + (σ' − (α'/α)·σ)·ε̂(x, t)`.
pub fn step_exponential(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    x: &[f64],
    t: f64,
    t_next: f64,
) -> Result<Vec<f64>> {
    let eps = gm.epsilon_hat(sched, x, t)?;
    exponential_update(sched, x, &eps, t, t_next)
}

/// The frozen-ε̂ update shared by [`step_exponential`] and tests that supply
/// their own noise field.
pub fn exponential_update(
    sched: &NoiseSchedule,
    x: &[f64],
    eps: &[f64],
    t: f64,
    t_next: f64,
) -> Result<Vec<f64>> {
    if t_next == t {
        return Ok(x.to_vec());
    }
    let t = t.max(sched.t_min);
    let t_next = t_next.max(sched.t_min);
    let ratio = sched.phi(t_next, t)?;
    let sigma = sched.sigma(t)?;
    let sigma_next = sched.sigma(t_next)?;
    let noise_coef = sigma_next - ratio * sigma;
    Ok(x.iter().zip(eps).map(|(xi, e)| ratio * xi + noise_coef * e).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    Heun,
    Exponential,
}

impl Solver {
    pub fn step(
        self,
        gm: &GaussianMixture,
        sched: &NoiseSchedule,
        x: &[f64],
        t: f64,
        t_next: f64,
    ) -> Result<Vec<f64>> {
        let rhs = |y: &[f64], s: f64| pf_rhs(gm, sched, y, s);
        match self {
            Solver::Euler => step_euler(rhs, x, t, t_next),
            Solver::Heun => step_heun(rhs, x, t, t_next),
            Solver::Exponential => step_exponential(gm, sched, x, t, t_next),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
            Solver::Exponential => "exponential",
        }
    }
}

/// Integrates `x` from `t` down to `t_end` in `steps` equal steps.
pub fn integrate(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    solver: Solver,
    x: &[f64],
    t: f64,
    t_end: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut state = x.to_vec();
    if t == t_end {
        return Ok(state);
    }
    let h = (t_end - t) / steps as f64;
    for i in 0..steps {
        let from = t + h * i as f64;
        let to = if i + 1 == steps { t_end } else { t + h * (i + 1) as f64 };
        state = solver.step(gm, sched, &state, from, to)?;
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { t: to });
        }
    }
    Ok(state)
}

/// Solves the reverse ODE from `T` through every grid time, taking
/// `substeps` solver steps per recording interval (including the leading
/// interval from `T` to the first grid time).
pub fn solve_trajectory(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    x_t: &[f64],
    grid: &TimeGrid,
    solver: Solver,
    substeps: usize,
) -> Result<Trajectory> {
    if substeps == 0 {
        return Err(Error::Config("substeps must be at least 1".into()));
    }
    if x_t.len() != gm.dim() {
        return Err(Error::shape("solve_trajectory", gm.dim(), x_t.len()));
    }
    if grid.start() > sched.t_max {
        return Err(Error::Domain {
            what: "grid start",
            value: grid.start(),
            range: format!("(0, {}]", sched.t_max),
        });
    }
    let mut values = Vec::with_capacity(grid.len() * x_t.len());
    let mut state = x_t.to_vec();
    let mut t = sched.t_max;
    for &target in grid.times() {
        state = integrate(gm, sched, solver, &state, t, target, substeps)?;
        values.extend_from_slice(&state);
        t = target;
    }
    Ok(Trajectory {
        x_t: x_t.to_vec(),
        values,
        grid: grid.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    /// σ̃_t = sqrt(α² s² + σ²), the marginal std of a centred Gaussian.
    fn marginal_std(s: &NoiseSchedule, std: f64, t: f64) -> f64 {
        let c = s.coefficients_at(t).unwrap();
        (c.alpha * c.alpha * std * std + c.sigma * c.sigma).sqrt()
    }

    #[test]
    fn grid_examples() {
        let tiny = 1e-12;
        let q = make_time_grid(4, GridScheme::Quadratic, 1.0, tiny).unwrap();
        for (a, b) in q.times().iter().zip([1.0, 0.5625, 0.25, 0.0625]) {
            assert!((a - b).abs() < 1e-11);
        }
        let u = make_time_grid(4, GridScheme::Uniform, 1.0, tiny).unwrap();
        for (a, b) in u.times().iter().zip([1.0, 0.75, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-11);
        }
        let one = make_time_grid(1, GridScheme::Quadratic, 0.7, 1e-3).unwrap();
        assert_eq!(one.times(), &[0.7]);
    }

    #[test]
    fn grid_errors() {
        assert!(make_time_grid(0, GridScheme::Uniform, 1.0, 1e-3).is_err());
        assert!(make_time_grid(4, GridScheme::Uniform, 1.0, 1.0).is_err());
        assert!(make_time_grid(4, GridScheme::Uniform, 1.0, 0.0).is_err());
        assert!(TimeGrid::from_times(vec![0.5, 0.5]).is_err());
        assert!(TimeGrid::from_times(vec![]).is_err());
    }

    #[test]
    fn rhs_vanishes_for_standard_normal() {
        let gm = GaussianMixture::standard_normal(3);
        for t in [1e-3, 0.25, 1.0] {
            let r = pf_rhs(&gm, &sched(), &[1.5, -0.3, 4.0], t).unwrap();
            assert_eq!(r.len(), 3);
            assert!(r.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn rhs_single_gaussian_closed_form() {
        let s2 = 0.3;
        let gm = GaussianMixture::new(vec![1.0], vec![vec![0.0, 0.0]], vec![s2]).unwrap();
        let x = [0.8, -1.1];
        for t in [0.05, 0.5, 0.95] {
            let c = sched().coefficients_at(t).unwrap();
            let var = c.alpha * c.alpha * s2 + c.sigma * c.sigma;
            let r = pf_rhs(&gm, &sched(), &x, t).unwrap();
            for i in 0..2 {
                let expected = -0.5 * c.beta * x[i] * (1.0 - 1.0 / var);
                assert!((r[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trivial_steps_leave_state_unchanged() {
        let zero = |x: &[f64], _t: f64| Ok(vec![0.0; x.len()]);
        let x = [1.0, 2.0];
        assert_eq!(step_euler(zero, &x, 0.5, 0.2).unwrap(), x);
        assert_eq!(step_heun(zero, &x, 0.5, 0.2).unwrap(), x);
        let lin = |x: &[f64], _t: f64| Ok(x.iter().map(|v| 3.0 * v).collect());
        assert_eq!(step_euler(lin, &x, 0.5, 0.5).unwrap(), x);
        assert_eq!(step_heun(lin, &x, 0.5, 0.5).unwrap(), x);
        let gm = GaussianMixture::default_bimodal();
        assert_eq!(step_exponential(&gm, &sched(), &x, 0.5, 0.5).unwrap(), x);
    }

    #[test]
    fn step_halving_rates_on_single_gaussian() {
        let std = 0.5;
        let gm = GaussianMixture::with_stds(vec![1.0], vec![vec![0.0]], &[std]).unwrap();
        let s = sched();
        let t0 = 1.0;
        let t1 = 0.05;
        let x0 = [1.3];
        let exact = x0[0] * marginal_std(&s, std, t1) / marginal_std(&s, std, t0);
        let err = |solver, n| (integrate(&gm, &s, solver, &x0, t0, t1, n).unwrap()[0] - exact).abs();
        let euler = err(Solver::Euler, 256) / err(Solver::Euler, 512);
        let heun = err(Solver::Heun, 256) / err(Solver::Heun, 512);
        assert!((euler - 2.0).abs() < 0.3, "euler ratio {euler}");
        assert!((heun - 4.0).abs() < 0.6, "heun ratio {heun}");
    }

    #[test]
    fn exponential_step_standard_normal_is_rotation() {
        let gm = GaussianMixture::standard_normal(2);
        let s = sched();
        let x = [0.7, -1.9];
        let (t, tn) = (0.8, 0.3);
        let out = step_exponential(&gm, &s, &x, t, tn).unwrap();
        let c = s.coefficients_at(t).unwrap();
        let cn = s.coefficients_at(tn).unwrap();
        let factor = cn.alpha * c.alpha + cn.sigma * c.sigma;
        // With α = cos θ the factor is cos(θ_t − θ_t').
        let angle = c.alpha.acos() - cn.alpha.acos();
        assert!((factor - angle.cos()).abs() < 1e-12);
        for (o, xi) in out.iter().zip(&x) {
            assert!((o - factor * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn exponential_step_with_zero_noise_is_homogeneous() {
        let s = sched();
        let x = [2.0, -0.5];
        let out = exponential_update(&s, &x, &[0.0, 0.0], 0.9, 0.4).unwrap();
        let phi = s.phi(0.4, 0.9).unwrap();
        assert_eq!(out, vec![phi * x[0], phi * x[1]]);
    }

    #[test]
    fn exponential_update_exact_for_constant_noise_field() {
        // dx/dt = h x + (g²/2σ) ε  with ε constant integrates to
        // x(t') = (α'/α) x + (σ' − (α'/α) σ) ε exactly; compare against a
        // fine Heun integration of that field.
        let s = sched();
        let eps = [0.4, -1.3];
        let x = [1.0, 0.25];
        let (t, tn) = (s.t_max, s.t_min);
        let one = exponential_update(&s, &x, &eps, t, tn).unwrap();
        let field = |y: &[f64], tau: f64| {
            let c = s.coefficients_at(tau)?;
            Ok(y
                .iter()
                .zip(&eps)
                .map(|(yi, e)| c.h * yi + 0.5 * c.beta / c.sigma * e)
                .collect())
        };
        let mut y = x.to_vec();
        let n = 20_000;
        for i in 0..n {
            let a = t + (tn - t) * i as f64 / n as f64;
            let b = t + (tn - t) * (i + 1) as f64 / n as f64;
            y = step_heun(field, &y, a, b).unwrap();
        }
        for (o, r) in one.iter().zip(&y) {
            assert!(((o - r) / r).abs() < 1e-6, "{o} vs {r}");
        }

        // Closed form via the antiderivative d(σ/α)/dτ = β/(2ασ):
        // x' = φ·x + α'·(σ'/α' − σ/α)·ε, with σ/α = sqrt(e^B − 1).
        let b = |tau: f64| s.beta_min * tau + 0.5 * (s.beta_max - s.beta_min) * tau * tau / s.t_max;
        let ratio = |tau: f64| b(tau).exp_m1().sqrt();
        let alpha_n = (-0.5 * b(tn)).exp();
        let phi = (-0.5 * (b(tn) - b(t))).exp();
        for i in 0..2 {
            let closed = phi * x[i] + alpha_n * (ratio(tn) - ratio(t)) * eps[i];
            assert!(((one[i] - closed) / closed).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_trajectory_records_every_grid_time() {
        let gm = GaussianMixture::default_bimodal();
        let grid = make_time_grid(4, GridScheme::Quadratic, 1.0, 1e-3).unwrap();
        let x = [0.3, -0.8];
        let a = solve_trajectory(&gm, &sched(), &x, &grid, Solver::Heun, 16).unwrap();
        let b = solve_trajectory(&gm, &sched(), &x, &grid, Solver::Heun, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.len(), 8);
        assert_eq!(a.grid.times(), grid.times());
        // first grid time equals T: no integration happens before it
        assert_eq!(a.row(0), &x);
        assert!(a.values.iter().all(|v| v.is_finite()));
        assert!(solve_trajectory(&gm, &sched(), &x, &grid, Solver::Heun, 0).is_err());
    }

    #[test]
    fn solve_trajectory_single_gaussian_scaling_law() {
        let std = 0.5;
        let gm = GaussianMixture::with_stds(vec![1.0], vec![vec![0.0, 0.0]], &[std]).unwrap();
        let s = sched();
        let grid = make_time_grid(4, GridScheme::Quadratic, 0.9, s.t_min).unwrap();
        let x = [1.1, -0.6];
        let traj = solve_trajectory(&gm, &s, &x, &grid, Solver::Heun, 256).unwrap();
        for (m, &t) in grid.times().iter().enumerate() {
            let scale = marginal_std(&s, std, t) / marginal_std(&s, std, s.t_max);
            for (v, xi) in traj.row(m).iter().zip(&x) {
                assert!(((v - xi * scale) / (xi * scale)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let gm = GaussianMixture::default_bimodal();
        let grid = TimeGrid::from_times(vec![0.5]).unwrap();
        let err = solve_trajectory(&gm, &sched(), &[f64::MAX, f64::MAX], &grid, Solver::Euler, 4);
        assert!(err.is_err());
    }
}
