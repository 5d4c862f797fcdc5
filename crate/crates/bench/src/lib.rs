//! Benchmark fixtures shared by the criterion targets.

use dsno_core::trajectories::{make_time_grid, record_noise, GridScheme};
use dsno_core::{DsnoConfig, DsnoParams, NoiseSchedule, TimeGrid};

pub fn default_grid() -> TimeGrid {
    let s = NoiseSchedule::default();
    make_time_grid(4, GridScheme::Quadratic, s.t_max, s.t_min).expect("default grid")
}

pub fn default_model(seed: u64) -> DsnoParams {
    DsnoParams::init(DsnoConfig::default(), seed).expect("default model")
}

/// `n × 2` seeded initial conditions.
pub fn noise_batch(n: usize) -> Vec<f64> {
    (0..n as u64).flat_map(|j| record_noise(0, j, 2)).collect()
}
