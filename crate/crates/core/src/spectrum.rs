//! Power spectra of sampled signals and of probability-flow trajectories.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::oracle::GaussianMixture;
use crate::schedule::NoiseSchedule;
use crate::trajectories::{record_noise, solve_trajectory, Solver, TimeGrid};

/// One-sided spectrum `S_j = (2Δ²/T)|X_j|²`, `j = 0..=N/2`, with `Δ = 1/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub power: Vec<f64>,
    pub period: f64,
    pub samples: usize,
}

impl PowerSpectrum {
    pub fn modes(&self) -> std::ops::Range<usize> {
        0..self.power.len()
    }
}

pub(crate) fn dft(signal: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

pub fn power_spectrum(signal: &[f64], period: f64) -> Result<PowerSpectrum> {
    let n = signal.len();
    if n < 2 {
        return Err(Error::Config(format!("power spectrum needs at least 2 samples, got {n}")));
    }
    if !(period > 0.0 && period.is_finite()) {
        return Err(Error::Domain {
            what: "period",
            value: period,
            range: "(0, inf)".into(),
        });
    }
    let delta = 1.0 / n as f64;
    let coef = 2.0 * delta * delta / period;
    let x = dft(signal);
    Ok(PowerSpectrum {
        power: x[..=n / 2].iter().map(|c| coef * c.norm_sqr()).collect(),
        period,
        samples: n,
    })
}

/// Share of power in modes `j ≤ j_max`, optionally ignoring the DC term in
/// both sums.
pub fn band_fraction(spec: &PowerSpectrum, j_max: usize, exclude_dc: bool) -> Result<f64> {
    if j_max >= spec.power.len() {
        return Err(Error::Domain {
            what: "j_max",
            value: j_max as f64,
            range: format!("[0, {}]", spec.power.len() - 1),
        });
    }
    let lo = usize::from(exclude_dc);
    let total: f64 = spec.power[lo..].iter().sum();
    if total <= 0.0 {
        return Err(Error::UndefinedFraction);
    }
    let band: f64 = spec.power.get(lo..=j_max).map_or(0.0, |s| s.iter().sum());
    Ok((band / total).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Sample count per signal.
    pub samples: usize,
    pub period: f64,
    /// Number of per-coordinate signals aggregated.
    pub signals: usize,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub band_limit: usize,
    /// Band fraction of the mean spectrum with DC excluded.
    pub band_fraction: f64,
    pub band_fraction_with_dc: f64,
}

impl SpectrumReport {
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "mode\tfrequency\tmean\tmin\tmax")?;
        for j in 0..self.mean.len() {
            writeln!(
                f,
                "{j}\t{:.6e}\t{:.9e}\t{:.9e}\t{:.9e}",
                j as f64 / self.period,
                self.mean[j],
                self.min[j],
                self.max[j]
            )?;
        }
        writeln!(
            f,
            "# band_fraction_j<={}\tnon_dc={:.9}\twith_dc={:.9}",
            self.band_limit, self.band_fraction, self.band_fraction_with_dc
        )?;
        f.flush()?;
        Ok(())
    }
}

/// Uniform recording times on `[t_min, T]`, newest first.
pub fn uniform_report_grid(sched: &NoiseSchedule, samples: usize) -> Result<TimeGrid> {
    if samples < 2 {
        return Err(Error::Config("spectrum grid needs at least 2 samples".into()));
    }
    let span = sched.t_max - sched.t_min;
    let mut times: Vec<f64> = (0..samples)
        .map(|n| sched.t_max - span * n as f64 / (samples - 1) as f64)
        .collect();
    times[samples - 1] = sched.t_min;
    TimeGrid::from_times(times)
}

/// Solves `n_traj` trajectories from seeded noise, records each at `samples`
/// uniform times on `[t_min, T]` (unit period), and aggregates the
/// per-coordinate spectra.
pub fn trajectory_spectrum_report(
    gm: &GaussianMixture,
    sched: &NoiseSchedule,
    n_traj: usize,
    samples: usize,
    seed: u64,
    solver: Solver,
    substeps: usize,
) -> Result<SpectrumReport> {
    const BAND: usize = 5;
    if n_traj == 0 {
        return Err(Error::Config("trajectory_spectrum_report needs at least one trajectory".into()));
    }
    let grid = uniform_report_grid(sched, samples)?;
    let d = gm.dim();
    let spectra = (0..n_traj)
        .into_par_iter()
        .map(|j| {
            let x = record_noise(seed, j as u64, d);
            let tr = solve_trajectory(gm, sched, &x, &grid, solver, substeps)?;
            (0..d)
                .map(|k| {
                    let signal: Vec<f64> = (0..samples).map(|m| tr.row(m)[k]).collect();
                    power_spectrum(&signal, 1.0).map(|s| s.power)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let spectra: Vec<Vec<f64>> = spectra.into_iter().flatten().collect();
    let modes = samples / 2 + 1;
    let mut mean = vec![0.0; modes];
    let mut min = vec![f64::INFINITY; modes];
    let mut max = vec![0.0f64; modes];
    for s in &spectra {
        for j in 0..modes {
            mean[j] += s[j] / spectra.len() as f64;
            min[j] = min[j].min(s[j]);
            max[j] = max[j].max(s[j]);
        }
    }
    let pooled = PowerSpectrum {
        power: mean.clone(),
        period: 1.0,
        samples,
    };
    let band_limit = BAND.min(modes - 1);
    Ok(SpectrumReport {
        samples,
        period: 1.0,
        signals: spectra.len(),
        band_fraction: band_fraction(&pooled, band_limit, true)?,
        band_fraction_with_dc: band_fraction(&pooled, band_limit, false)?,
        mean,
        min,
        max,
        band_limit,
    })
}
