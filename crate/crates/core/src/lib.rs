//! Distillation of a diffusion probability-flow ODE into a one-call Fourier
//! temporal neural operator.
//!
//! The pieces, bottom up:
//!
//! - [`schedule`]: variance-preserving noise schedule and semi-linear ODE
//!   coefficients.
//! - [`oracle`]: Gaussian-mixture data with an exact perturbed score.
//! - [`trajectories`]: probability-flow ODE solvers, supervision grids and
//!   the persisted trajectory dataset.
//! - [`nnops`]: differentiable pointwise and spectral temporal ops.
//! - [`dsno`]: the operator network and its checkpoint format.
//! - [`train`]: weighted empirical-risk training and evaluation metrics.
//! - [`spectrum`]: power spectra of ODE trajectories.

pub mod dsno;
pub mod error;
pub mod nnops;
pub mod oracle;
pub mod schedule;
pub mod spectrum;
pub mod trajectories;
pub mod train;

pub use dsno::{Checkpoint, DsnoConfig, DsnoParams, ParamSet};
pub use error::{Error, Result};
pub use oracle::GaussianMixture;
pub use schedule::{NoiseSchedule, ScheduleCoeffs};
pub use train::{TrainConfig, Weighting};
pub use trajectories::{make_time_grid, GridScheme, Solver, TimeGrid, Trajectory, TrajectoryDataset};
