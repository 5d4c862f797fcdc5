use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsno::{forward_batch, DsnoParams};
use crate::error::{Error, Result};
use crate::oracle::GaussianMixture;
use crate::schedule::NoiseSchedule;
use crate::trajectories::{integrate, step_euler, step_heun, Solver, TrajectoryDataset};

#[derive(Debug, Clone, PartialEq)]
pub struct RmseReport {
    pub times: Vec<f64>,
    pub per_time: Vec<f64>,
    pub pooled: f64,
}

impl RmseReport {
    /// `time\trmse` rows followed by a `pooled` row.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "time\trmse")?;
        for (t, r) in self.times.iter().zip(&self.per_time) {
            writeln!(f, "{t:.9e}\t{r:.9e}")?;
        }
        writeln!(f, "pooled\t{:.9e}", self.pooled)?;
        f.flush()?;
        Ok(())
    }
}

/// RMSE per grid time and pooled over `n × M × d` predictions.
pub fn rmse_report(pred: &[f64], target: &[f64], times: &[f64], dim: usize) -> Result<RmseReport> {
    let m = times.len();
    let row = m * dim;
    if pred.len() != target.len() || row == 0 || !pred.len().is_multiple_of(row) || pred.is_empty() {
        return Err(Error::shape("rmse_report", target.len(), pred.len()));
    }
    let n = pred.len() / row;
    let mut sq = vec![0.0; m];
    for (i, (p, q)) in pred.iter().zip(target).enumerate() {
        sq[(i / dim) % m] += (p - q) * (p - q);
    }
    let pooled = (sq.iter().sum::<f64>() / pred.len() as f64).sqrt();
    let per_time = sq.iter().map(|s| (s / (n * dim) as f64).sqrt()).collect();
    Ok(RmseReport {
        times: times.to_vec(),
        per_time,
        pooled,
    })
}

pub fn eval_trajectory_rmse(params: &DsnoParams, heldout: &TrajectoryDataset) -> Result<RmseReport> {
    if heldout.dim() != params.config.dim || heldout.grid().len() != params.config.resolution {
        return Err(Error::Config("held-out dataset does not match the model's dim and resolution".into()));
    }
    let xs: Vec<f64> = heldout.all_x_t().iter().map(|&v| v as f64).collect();
    let target: Vec<f64> = heldout.all_values().iter().map(|&v| v as f64).collect();
    let pred = forward_batch(params, &xs, heldout.grid())?;
    rmse_report(&pred, &target, heldout.grid().times(), heldout.dim())
}

/// Exact Wasserstein-1 distance between two 1-D empirical measures,
/// integrating `|F⁻¹ − G⁻¹|` over the merged quantile breakpoints.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("wasserstein distance of an empty sample".into()));
    }
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut q = 0.0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = next_a.min(next_b);
        total += (next - q) * (a[i] - b[j]).abs();
        q = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Mean 1-D Wasserstein-1 distance over `n_proj` seeded random unit
/// directions. `a` and `b` are row-major with `dim` columns.
pub fn sliced_wasserstein(a: &[f64], b: &[f64], dim: usize, n_proj: usize, seed: u64) -> Result<f64> {
    if dim == 0 || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(Error::shape("sliced_wasserstein", format!("multiple of {dim}"), a.len()));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("sliced wasserstein distance of an empty sample".into()));
    }
    if n_proj == 0 {
        return Err(Error::Config("sliced wasserstein needs at least one projection".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let project = |x: &[f64], dir: &[f64]| -> Vec<f64> {
        x.chunks_exact(dim).map(|r| r.iter().zip(dir).map(|(u, v)| u * v).sum()).collect()
    };
    let mut total = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        total += wasserstein_1d(&mut project(a, &dir), &mut project(b, &dir))?;
    }
    Ok(total / n_proj as f64)
}

/// Scalar problems with known solutions for measuring solver order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvergenceProblem {
    /// Data `N(0, std²)`: the flow is `x(t) = x_T · σ̃_t / σ̃_T` with
    /// `σ̃_t² = α_t² std² + σ_t²`.
    Gaussian { std: f64, x_t: f64, t_end: f64 },
    /// `dx/dt = rate`, integrated exactly by either explicit solver.
    ConstantRate { rate: f64, x_t: f64, t_end: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvergenceResult {
    /// Negated least-squares slope of `ln error` against `ln steps`.
    Fitted { order: f64, steps: Vec<usize>, errors: Vec<f64> },
    /// Every error is at rounding level, so no slope is defined.
    Exact { max_error: f64 },
}

impl ConvergenceResult {
    pub fn order(&self) -> Option<f64> {
        match self {
            ConvergenceResult::Fitted { order, .. } => Some(*order),
            ConvergenceResult::Exact { .. } => None,
        }
    }
}

pub fn convergence_order(
    solver: Solver,
    problem: ConvergenceProblem,
    sched: &NoiseSchedule,
    steps: &[usize],
) -> Result<ConvergenceResult> {
    if steps.len() < 2 || steps.contains(&0) {
        return Err(Error::Config("convergence_order needs at least two positive step counts".into()));
    }
    let mut errors = Vec::with_capacity(steps.len());
    let mut scale = 1.0f64;
    for &n in steps {
        let err = match problem {
            ConvergenceProblem::Gaussian { std, x_t, t_end } => {
                let gm = GaussianMixture::with_stds(vec![1.0], vec![vec![0.0]], &[std])?;
                let spread = |t: f64| -> Result<f64> {
                    let a = sched.alpha(t)?;
                    let s = sched.sigma(t)?;
                    Ok((a * a * std * std + s * s).sqrt())
                };
                let exact = x_t * spread(t_end)? / spread(sched.t_max)?;
                scale = scale.max(exact.abs());
                let x = integrate(&gm, sched, solver, &[x_t], sched.t_max, t_end, n)?;
                (x[0] - exact).abs()
            }
            ConvergenceProblem::ConstantRate { rate, x_t, t_end } => {
                let rhs = |_: &[f64], _: f64| -> Result<Vec<f64>> { Ok(vec![rate]) };
                let exact = x_t + rate * (t_end - sched.t_max);
                scale = scale.max(exact.abs());
                let h = (t_end - sched.t_max) / n as f64;
                let mut x = vec![x_t];
                for i in 0..n {
                    let (a, b) = (sched.t_max + h * i as f64, sched.t_max + h * (i + 1) as f64);
                    x = match solver {
                        Solver::Euler => step_euler(rhs, &x, a, b)?,
                        Solver::Heun => step_heun(rhs, &x, a, b)?,
                        Solver::Exponential => {
                            return Err(Error::Config("the exponential step needs a score model".into()))
                        }
                    };
                }
                (x[0] - exact).abs()
            }
        };
        errors.push(err);
    }
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    if max_error <= 1e3 * f64::EPSILON * scale {
        return Ok(ConvergenceResult::Exact { max_error });
    }
    let xs: Vec<f64> = steps.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(ConvergenceResult::Fitted {
        order: -cov / var,
        steps: steps.to_vec(),
        errors,
    })
}
