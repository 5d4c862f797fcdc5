//! Experiment configuration: one strict JSON document, every default
//! materialized after parsing.

use std::path::{Path, PathBuf};

use dsno_core::dsno::DsnoConfig;
use dsno_core::nnops::max_modes;
use dsno_core::trajectories::{make_time_grid, GridScheme, Solver, TimeGrid};
use dsno_core::{GaussianMixture, NoiseSchedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSection {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl Default for MixtureSection {
    fn default() -> Self {
        Self {
            weights: vec![0.5, 0.5],
            means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            stds: vec![0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub resolution: usize,
    pub scheme: GridScheme,
    /// Integration start `s`; `null` means `schedule.t_max`.
    pub start: Option<f64>,
    /// `null` means `schedule.t_min`.
    pub floor: Option<f64>,
    /// Explicit decreasing times, required for `custom`.
    pub times: Option<Vec<f64>>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            resolution: 4,
            scheme: GridScheme::Quadratic,
            start: None,
            floor: None,
            times: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub size: u64,
    pub seed: u64,
    pub heldout_size: u64,
    pub heldout_seed: u64,
    pub solver: Solver,
    pub substeps: usize,
    pub path: PathBuf,
    pub heldout_path: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            size: 50_000,
            seed: 1,
            heldout_size: 2_000,
            heldout_seed: 1_000_000,
            solver: Solver::Heun,
            substeps: 64,
            path: PathBuf::from("data/train.dsno"),
            heldout_path: PathBuf::from("data/heldout.dsno"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channels: usize,
    pub blocks: usize,
    /// `null` means all `⌊M/2⌋ + 1` modes.
    pub modes: Option<usize>,
    pub embed: usize,
    pub slope: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DsnoConfig::default();
        Self {
            channels: d.channels,
            blocks: d.blocks,
            modes: None,
            embed: d.embed,
            slope: d.slope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Endpoint samples compared against fresh oracle data.
    pub samples: usize,
    pub projections: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            samples: 10_000,
            projections: 128,
            seed: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSection {
    pub trajectories: usize,
    pub samples: usize,
    pub seed: u64,
    pub solver: Solver,
    pub substeps: usize,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self {
            trajectories: 100,
            samples: 1000,
            seed: 0,
            solver: Solver::Heun,
            substeps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schedule: NoiseSchedule,
    pub mixture: MixtureSection,
    pub grid: GridSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub eval: EvalSection,
    pub spectrum: SpectrumSection,
    /// Directory receiving every output except the dataset files.
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            mixture: MixtureSection::default(),
            grid: GridSection::default(),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            training: TrainConfig::default(),
            eval: EvalSection::default(),
            spectrum: SpectrumSection::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

fn invalid(field: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {why}"))
}

impl ExperimentConfig {
    /// Fills `null` defaults that depend on other fields.
    pub fn materialize(&mut self) {
        let times_len = self.grid.times.as_ref().map(Vec::len);
        if self.grid.scheme == GridScheme::Custom {
            if let Some(n) = times_len {
                self.grid.resolution = n;
            }
        }
        self.grid.start.get_or_insert(self.schedule.t_max);
        self.grid.floor.get_or_insert(self.schedule.t_min);
        self.model.modes.get_or_insert(max_modes(self.grid.resolution));
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.schedule.validate().map_err(|e| invalid("schedule", e))?;
        self.mixture().map_err(|e| invalid("mixture", e))?;
        self.time_grid()?;
        if self.dataset.size == 0 {
            return Err(invalid("dataset.size", "must be positive"));
        }
        if self.dataset.heldout_size == 0 {
            return Err(invalid("dataset.heldout_size", "must be positive"));
        }
        if self.dataset.substeps == 0 {
            return Err(invalid("dataset.substeps", "must be positive"));
        }
        let j = self.model.modes.unwrap_or(0);
        let j_max = max_modes(self.grid.resolution);
        if j == 0 || j > j_max {
            return Err(invalid(
                "model.modes",
                format!("must lie in 1..={j_max} for grid.resolution = {} (got {j})", self.grid.resolution),
            ));
        }
        self.model_config().validate().map_err(|e| invalid("model", e))?;
        self.training.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.samples == 0 {
            return Err(invalid("eval.samples", "must be positive"));
        }
        if self.eval.projections == 0 {
            return Err(invalid("eval.projections", "must be positive"));
        }
        if self.spectrum.trajectories == 0 {
            return Err(invalid("spectrum.trajectories", "must be positive"));
        }
        if self.spectrum.samples < 2 {
            return Err(invalid("spectrum.samples", "must be at least 2"));
        }
        if self.spectrum.substeps == 0 {
            return Err(invalid("spectrum.substeps", "must be positive"));
        }
        Ok(())
    }

    pub fn mixture(&self) -> dsno_core::Result<GaussianMixture> {
        GaussianMixture::with_stds(self.mixture.weights.clone(), self.mixture.means.clone(), &self.mixture.stds)
    }

    pub fn time_grid(&self) -> Result<TimeGrid, CliError> {
        let grid = match (self.grid.scheme, &self.grid.times) {
            (GridScheme::Custom, Some(times)) => TimeGrid::from_times(times.clone()),
            (GridScheme::Custom, None) => return Err(invalid("grid.times", "required for the custom scheme")),
            (_, Some(_)) => return Err(invalid("grid.times", "only allowed with the custom scheme")),
            (scheme, None) => make_time_grid(
                self.grid.resolution,
                scheme,
                self.grid.start.unwrap_or(self.schedule.t_max),
                self.grid.floor.unwrap_or(self.schedule.t_min),
            ),
        }
        .map_err(|e| invalid("grid", e))?;
        if grid.start() > self.schedule.t_max {
            return Err(invalid("grid.start", "must not exceed schedule.t_max"));
        }
        Ok(grid)
    }

    pub fn model_config(&self) -> DsnoConfig {
        DsnoConfig {
            dim: self.mixture.means.first().map_or(0, Vec::len),
            channels: self.model.channels,
            blocks: self.model.blocks,
            modes: self.model.modes.unwrap_or_else(|| max_modes(self.grid.resolution)),
            resolution: self.grid.resolution,
            embed: self.model.embed,
            slope: self.model.slope,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every effective setting as `(dotted.path, value)` pairs.
    pub fn flattened(&self) -> Vec<(String, String)> {
        fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
            match v {
                serde_json::Value::Object(map) => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                other => out.push((prefix.to_string(), other.to_string())),
            }
        }
        let mut out = Vec::new();
        walk("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }
}

/// Strict parse: unknown keys and type errors report their JSON path.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{path}: {}", e.inner()))
    })?;
    cfg.materialize();
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text)
}
