//! The operator network: lift the initial noise to `C` channels, replicate
//! it over the `M` temporal rows, run `L` residual blocks (pointwise MLP
//! conditioned on the time embedding, then a Fourier temporal convolution)
//! and project every row back to data space.

mod checkpoint;
mod network;

pub use checkpoint::{Checkpoint, TrainingSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{
    backward, forward, forward_batch, forward_traced, query_at, query_positions, spectral_branch,
    query_traced, temporal_conv, temporal_conv_backward, ForwardTrace, QueryTrace, SpectralBranch,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnops::{max_modes, Affine, SpectralKernel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsnoConfig {
    /// Data dimension `d`.
    pub dim: usize,
    /// Channel width `C`.
    pub channels: usize,
    /// Residual blocks `L`.
    pub blocks: usize,
    /// Retained temporal modes `J`.
    pub modes: usize,
    /// Training temporal resolution `M`.
    pub resolution: usize,
    /// Time-embedding width `E`.
    pub embed: usize,
    /// LeakyReLU negative slope.
    pub slope: f64,
}

impl Default for DsnoConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            channels: 64,
            blocks: 4,
            modes: 3,
            resolution: 4,
            embed: 32,
            slope: 0.01,
        }
    }
}

impl DsnoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("modes", self.modes),
            ("resolution", self.resolution),
            ("embed", self.embed),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.modes > max_modes(self.resolution) {
            return Err(Error::Config(format!(
                "model.modes = {} exceeds floor(M/2)+1 = {} for M = {}",
                self.modes,
                max_modes(self.resolution),
                self.resolution
            )));
        }
        if !self.embed.is_multiple_of(2) {
            return Err(Error::Config("model.embed must be even".into()));
        }
        if !(self.slope.is_finite() && self.slope > 0.0) {
            return Err(Error::Config("model.slope must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count (complex kernel entries count twice).
    pub fn param_count(&self) -> usize {
        let (d, c, e, j) = (self.dim, self.channels, self.embed, self.modes);
        d * c + c + self.blocks * (e * c + c + 2 * (c * c + c) + 2 * j * c * c) + c * d + d
    }

    /// Real parameters held by the temporal spectral kernels.
    pub fn spectral_param_count(&self) -> usize {
        self.blocks * 2 * self.modes * self.channels * self.channels
    }

    /// Fraction of all parameters that live in the spectral kernels.
    pub fn spectral_share(&self) -> f64 {
        self.spectral_param_count() as f64 / self.param_count() as f64
    }
}

/// One residual block: time-embedding projection, two pointwise affines and
/// the temporal kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub embed: Affine,
    pub first: Affine,
    pub second: Affine,
    pub kernel: SpectralKernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsnoParams {
    pub config: DsnoConfig,
    pub lift: Affine,
    pub blocks: Vec<Block>,
    pub project: Affine,
}

/// Named tensors visited in declaration order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.to_vec()).collect()
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("assign_flat", self.param_count(), flat.len()));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

impl ParamSet for DsnoParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("lift.weight".into(), &self.lift.weight),
            ("lift.bias".into(), &self.lift.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.embed.weight"), &b.embed.weight));
            out.push((format!("blocks.{i}.embed.bias"), &b.embed.bias));
            out.push((format!("blocks.{i}.first.weight"), &b.first.weight));
            out.push((format!("blocks.{i}.first.bias"), &b.first.bias));
            out.push((format!("blocks.{i}.second.weight"), &b.second.weight));
            out.push((format!("blocks.{i}.second.bias"), &b.second.bias));
            out.push((format!("blocks.{i}.kernel.re"), &b.kernel.re));
            out.push((format!("blocks.{i}.kernel.im"), &b.kernel.im));
        }
        out.push(("project.weight".into(), &self.project.weight));
        out.push(("project.bias".into(), &self.project.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("lift.weight".into(), &mut self.lift.weight),
            ("lift.bias".into(), &mut self.lift.bias),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.embed.weight"), &mut b.embed.weight));
            out.push((format!("blocks.{i}.embed.bias"), &mut b.embed.bias));
            out.push((format!("blocks.{i}.first.weight"), &mut b.first.weight));
            out.push((format!("blocks.{i}.first.bias"), &mut b.first.bias));
            out.push((format!("blocks.{i}.second.weight"), &mut b.second.weight));
            out.push((format!("blocks.{i}.second.bias"), &mut b.second.bias));
            out.push((format!("blocks.{i}.kernel.re"), &mut b.kernel.re));
            out.push((format!("blocks.{i}.kernel.im"), &mut b.kernel.im));
        }
        out.push(("project.weight".into(), &mut self.project.weight));
        out.push(("project.bias".into(), &mut self.project.bias));
        out
    }
}

impl DsnoParams {
    /// All-zero parameters; also the gradient buffer layout.
    pub fn zeros(config: DsnoConfig) -> Self {
        let c = config.channels;
        Self {
            config,
            lift: Affine::zeros(config.dim, c),
            blocks: (0..config.blocks)
                .map(|_| Block {
                    embed: Affine::zeros(config.embed, c),
                    first: Affine::zeros(c, c),
                    second: Affine::zeros(c, c),
                    kernel: SpectralKernel::zeros(config.modes, c),
                })
                .collect(),
            project: Affine::zeros(c, config.dim),
        }
    }

    /// Affine weights and biases uniform in `±1/√fan_in`; kernel real and
    /// imaginary parts uniform in `±1/C`.
    pub fn init(config: DsnoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel_bound = 1.0 / config.channels as f64;
        let fill = |rng: &mut ChaCha8Rng, t: &mut [f64], bound: f64| {
            for v in t.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        };
        let affine = |rng: &mut ChaCha8Rng, a: &mut Affine| {
            let bound = 1.0 / (a.inputs as f64).sqrt();
            fill(rng, &mut a.weight, bound);
            fill(rng, &mut a.bias, bound);
        };
        affine(&mut rng, &mut params.lift);
        for b in &mut params.blocks {
            affine(&mut rng, &mut b.embed);
            affine(&mut rng, &mut b.first);
            affine(&mut rng, &mut b.second);
            fill(&mut rng, &mut b.kernel.re, kernel_bound);
            fill(&mut rng, &mut b.kernel.im, kernel_bound);
        }
        affine(&mut rng, &mut params.project);
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}
