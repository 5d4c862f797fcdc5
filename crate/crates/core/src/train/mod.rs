//! Weighted empirical-risk training of the operator, Adam with linear
//! warmup, deterministic shuffling and resumable state, plus evaluation
//! metrics.

mod metrics;

pub use metrics::{
    convergence_order, eval_trajectory_rmse, rmse_report, sliced_wasserstein, wasserstein_1d,
    ConvergenceProblem, ConvergenceResult, RmseReport,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsno::{backward, forward_traced, Checkpoint, DsnoConfig, DsnoParams, ParamSet, TrainingSnapshot};
use crate::error::{Error, Result};
use crate::nnops::FeatureGrid;
use crate::schedule::NoiseSchedule;
use crate::trajectories::{TimeGrid, TrajectoryDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    /// `λ(t) = α_t / σ_t`.
    SnrSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    /// Linear warmup length; 0 disables warmup.
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weighting: Weighting,
    pub seed: u64,
    /// Steps between checkpoints written by [`train`]; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 20_000,
            lr: 2e-4,
            warmup: 500,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weighting: Weighting::SnrSqrt,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("training.{field} {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.steps == 0 {
            return bad("steps", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        if self.warmup > self.steps {
            return bad("warmup", "must not exceed training.steps");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps", "must be positive and finite");
        }
        Ok(())
    }
}

pub fn lr_at(config: &TrainConfig, step: u64) -> f64 {
    if config.warmup == 0 {
        return config.lr;
    }
    config.lr * (step as f64 / config.warmup as f64).min(1.0)
}

/// Per-time loss weights on `grid`.
pub fn loss_weights(sched: &NoiseSchedule, grid: &TimeGrid, weighting: Weighting) -> Result<Vec<f64>> {
    grid.times()
        .iter()
        .map(|&t| match weighting {
            Weighting::Uniform => Ok(1.0),
            Weighting::SnrSqrt => sched.loss_weight(t),
        })
        .collect()
}

/// `(1/M) Σ_m λ_m Σ_k |pred − target|` for one `M × d` trajectory.
pub fn weighted_loss(pred: &[f64], target: &[f64], weights: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || weights.is_empty() || !pred.len().is_multiple_of(weights.len()) {
        return Err(Error::shape("weighted_loss", target.len(), pred.len()));
    }
    let dim = pred.len() / weights.len();
    let total: f64 = weights
        .iter()
        .enumerate()
        .map(|(m, w)| {
            let row = m * dim..(m + 1) * dim;
            w * pred[row.clone()].iter().zip(&target[row]).map(|(p, q)| (p - q).abs()).sum::<f64>()
        })
        .sum();
    Ok(total / weights.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: DsnoParams,
    pub second_moment: DsnoParams,
}

impl OptimizerState {
    pub fn new(params: &DsnoParams) -> Self {
        Self {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update of a single tensor; `step` is the
/// 1-based count after this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for i in 0..param.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
    }
}

pub fn adam_step(
    params: &mut DsnoParams,
    grads: &DsnoParams,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads.tensors() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first_moment.tensors_mut())
        .zip(state.second_moment.tensors_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
        adam_update(p, g, m, v, state.step, lr, (config.beta1, config.beta2), config.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Samples per gradient work unit; the batch is split into units that run in
/// parallel and are summed in unit order.
const GRAD_CHUNK: usize = 32;

pub struct Trainer<'a> {
    data: &'a TrajectoryDataset,
    config: TrainConfig,
    params: DsnoParams,
    state: OptimizerState,
    weights: Vec<f64>,
    permutation: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrajectoryDataset, config: TrainConfig, model: DsnoConfig) -> Result<Self> {
        let params = DsnoParams::init(model, config.seed)?;
        let state = OptimizerState::new(&params);
        Self::with_state(data, config, params, state)
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(data: &'a TrajectoryDataset, config: TrainConfig, checkpoint: Checkpoint) -> Result<Self> {
        let snap = checkpoint
            .training
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        let state = OptimizerState {
            step: snap.step,
            first_moment: snap.first_moment,
            second_moment: snap.second_moment,
        };
        Self::with_state(data, config, checkpoint.params, state)
    }

    fn with_state(
        data: &'a TrajectoryDataset,
        config: TrainConfig,
        params: DsnoParams,
        state: OptimizerState,
    ) -> Result<Self> {
        config.validate()?;
        let model = params.config;
        if data.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        if data.dim() != model.dim {
            return Err(Error::Config(format!(
                "dataset dimension {} does not match model.dim = {}",
                data.dim(),
                model.dim
            )));
        }
        if data.grid().len() != model.resolution {
            return Err(Error::Config(format!(
                "dataset grid has {} times but model.resolution = {}",
                data.grid().len(),
                model.resolution
            )));
        }
        let weights = loss_weights(&data.header.schedule, data.grid(), config.weighting)?;
        Ok(Self {
            data,
            config,
            params,
            state,
            weights,
            permutation: None,
        })
    }

    pub fn params(&self) -> &DsnoParams {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.state
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            training: Some(TrainingSnapshot {
                step: self.state.step,
                first_moment: self.state.first_moment.clone(),
                second_moment: self.state.second_moment.clone(),
            }),
            metadata: serde_json::to_value(&self.config).unwrap_or(serde_json::Value::Null),
        }
    }

    /// Record indices of the next batch. Sample position `i` of the stream
    /// belongs to epoch `i / N` and maps through that epoch's permutation
    /// (stream `epoch + 1`; stream 0 of the seed initializes the weights).
    fn batch_indices(&mut self) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.config.batch_size as u64;
        (self.state.step * b..(self.state.step + 1) * b)
            .map(|i| {
                let epoch = i / n;
                if self.permutation.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                    rng.set_stream(epoch + 1);
                    let mut perm: Vec<usize> = (0..n as usize).collect();
                    perm.shuffle(&mut rng);
                    self.permutation = Some((epoch, perm));
                }
                self.permutation.as_ref().unwrap().1[(i % n) as usize]
            })
            .collect()
    }

    /// Batch loss and gradient at the current parameters.
    pub fn loss_and_grad(&self, indices: &[usize]) -> Result<(f64, DsnoParams)> {
        let d = self.data.dim();
        let m = self.weights.len();
        let scale = 1.0 / (m * indices.len()) as f64;
        let parts = indices
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut xs = Vec::with_capacity(chunk.len() * d);
                let mut target = Vec::with_capacity(chunk.len() * m * d);
                for &j in chunk {
                    xs.extend(self.data.x_t(j).iter().map(|&v| v as f64));
                    target.extend(self.data.values(j).iter().map(|&v| v as f64));
                }
                let x = FeatureGrid::from_vec(chunk.len(), 1, d, xs)?;
                let trace = forward_traced(&self.params, &x, self.data.grid().times())?;
                let pred = trace.output.data();
                let mut loss = 0.0;
                let mut grad_out = vec![0.0; pred.len()];
                for (i, (p, q)) in pred.iter().zip(&target).enumerate() {
                    let w = self.weights[(i / d) % m];
                    let e = p - q;
                    loss += w * e.abs();
                    grad_out[i] = w * scale * if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 };
                }
                let grad_out = FeatureGrid::from_vec(chunk.len(), m, d, grad_out)?;
                let mut grads = self.params.zeros_like();
                backward(&self.params, &trace, &grad_out, &mut grads)?;
                Ok((loss * scale, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        let mut grads = self.params.zeros_like();
        for (l, g) in &parts {
            total += l;
            grads.add_assign(g);
        }
        Ok((total, grads))
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let indices = self.batch_indices();
        let (loss, grads) = self.loss_and_grad(&indices)?;
        let step = self.state.step + 1;
        if !loss.is_finite() {
            return Err(Error::LossDiverged { step });
        }
        let lr = lr_at(&self.config, step);
        adam_step(&mut self.params, &grads, &mut self.state, lr, &self.config)?;
        Ok(StepRecord { step, lr, loss })
    }

    /// Steps until the counter reaches `config.steps`.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut log = Vec::new();
        while self.state.step < self.config.steps {
            let rec = self.step()?;
            on_step(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }
}

pub struct TrainOutcome {
    pub params: DsnoParams,
    pub losses: Vec<StepRecord>,
    pub checkpoint: Option<PathBuf>,
}

pub fn write_loss_tsv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step\tlr\tloss")?;
    for r in records {
        writeln!(f, "{}\t{:e}\t{:.9e}", r.step, r.lr, r.loss)?;
    }
    f.flush()?;
    Ok(())
}

/// Full training run. With `out_dir`, writes `loss.tsv`, periodic
/// `checkpoint-<step>.ckpt` files and a final `model.ckpt`.
pub fn train(
    data: &TrajectoryDataset,
    config: &TrainConfig,
    model: DsnoConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(data, config.clone(), model)?;
    let every = config.checkpoint_every;
    let losses = trainer.run(|t, rec| {
        if let (Some(dir), true) = (out_dir, every > 0 && rec.step % every == 0) {
            t.checkpoint().save(&dir.join(format!("checkpoint-{}.ckpt", rec.step)))?;
        }
        Ok(())
    })?;
    let checkpoint = match out_dir {
        Some(dir) => {
            write_loss_tsv(&dir.join("loss.tsv"), &losses)?;
            let path = dir.join("model.ckpt");
            trainer.checkpoint().save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        params: trainer.params,
        losses,
        checkpoint,
    })
}
