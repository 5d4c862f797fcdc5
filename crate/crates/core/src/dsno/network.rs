use rayon::prelude::*;

use super::{Block, DsnoParams};
use crate::error::{Error, Result};
use crate::nnops::{
    affine_backward, affine_pointwise, dft_backward, dft_truncated, idft_at, idft_at_backward,
    leaky_relu, leaky_relu_backward, mode_multiply, mode_multiply_backward, time_embedding,
    FeatureGrid, ModeCoeffs, SpectralKernel,
};
use crate::trajectories::TimeGrid;

/// Intermediate values of `K u = F⁻¹(R · F u)` evaluated at `positions`.
#[derive(Debug, Clone)]
pub struct SpectralBranch {
    pub modes_in: ModeCoeffs,
    pub mixed: ModeCoeffs,
    pub positions: Vec<f64>,
    /// `K u` before the activation, one row per position.
    pub values: FeatureGrid,
}

pub fn spectral_branch(kernel: &SpectralKernel, u: &FeatureGrid, positions: &[f64]) -> Result<SpectralBranch> {
    if u.channels() != kernel.channels {
        return Err(Error::shape("spectral_branch", kernel.channels, u.channels()));
    }
    let modes_in = dft_truncated(u, kernel.modes)?;
    let mixed = mode_multiply(kernel, &modes_in)?;
    let values = idft_at(&mixed, u.len(), positions)?;
    Ok(SpectralBranch {
        modes_in,
        mixed,
        positions: positions.to_vec(),
        values,
    })
}

fn integer_positions(m: usize) -> Vec<f64> {
    (0..m).map(|n| n as f64).collect()
}

fn activate_residual(u: &FeatureGrid, branch: &FeatureGrid, slope: f64) -> Result<FeatureGrid> {
    let mut out = u.clone();
    out.add_assign(&leaky_relu(branch, slope))?;
    Ok(out)
}

/// `u + σ(K u)` on the sample grid of `u`.
pub fn temporal_conv(kernel: &SpectralKernel, u: &FeatureGrid, slope: f64) -> Result<FeatureGrid> {
    let branch = spectral_branch(kernel, u, &integer_positions(u.len()))?;
    activate_residual(u, &branch.values, slope)
}

fn branch_backward(
    kernel: &SpectralKernel,
    branch: &SpectralBranch,
    len: usize,
    grad_out: &FeatureGrid,
    slope: f64,
    grad_kernel: &mut SpectralKernel,
) -> Result<FeatureGrid> {
    let grad_k = leaky_relu_backward(&branch.values, grad_out, slope);
    let grad_mixed = idft_at_backward(&grad_k, len, &branch.positions, kernel.modes)?;
    let grad_modes = mode_multiply_backward(kernel, &branch.modes_in, &grad_mixed, grad_kernel)?;
    Ok(dft_backward(&grad_modes, len))
}

/// Accumulates `∂L/∂R` and returns `∂L/∂u` for [`temporal_conv`].
pub fn temporal_conv_backward(
    kernel: &SpectralKernel,
    u: &FeatureGrid,
    grad_out: &FeatureGrid,
    slope: f64,
    grad_kernel: &mut SpectralKernel,
) -> Result<FeatureGrid> {
    let branch = spectral_branch(kernel, u, &integer_positions(u.len()))?;
    let mut grad_in = branch_backward(kernel, &branch, u.len(), grad_out, slope, grad_kernel)?;
    grad_in.add_assign(grad_out)?;
    Ok(grad_in)
}

struct BlockCache {
    /// Block input plus time-embedding projection.
    a: FeatureGrid,
    z1: FeatureGrid,
    a1: FeatureGrid,
    /// Output of the pointwise residual, input of the temporal conv.
    r: FeatureGrid,
    branch: SpectralBranch,
}

/// Everything `backward` needs, plus bookkeeping on how the rows were
/// produced.
pub struct ForwardTrace {
    x: FeatureGrid,
    embedding: FeatureGrid,
    blocks: Vec<BlockCache>,
    last_hidden: FeatureGrid,
    /// `batch × M × d` prediction.
    pub output: FeatureGrid,
    /// Lifting applications: one per initial condition, shared by its rows.
    pub lift_applications: usize,
    /// Rows passed through the projection.
    pub projected_rows: usize,
}

fn embedding_grid(times: &[f64], width: usize) -> Result<FeatureGrid> {
    let mut data = Vec::with_capacity(times.len() * width);
    for &t in times {
        data.extend(time_embedding(t, width)?);
    }
    FeatureGrid::single(times.len(), width, data)
}

fn add_broadcast(h: &FeatureGrid, per_row: &FeatureGrid) -> FeatureGrid {
    let mut out = h.clone();
    for b in 0..h.batch() {
        for m in 0..h.len() {
            for (o, e) in out.row_mut(b, m).iter_mut().zip(per_row.row(0, m)) {
                *o += e;
            }
        }
    }
    out
}

/// Time-conditioned pointwise residual `a + W₂ σ(W₁ a + b₁) + b₂`, `a = h + e`.
fn pointwise_block(
    block: &Block,
    h: &FeatureGrid,
    embedding: &FeatureGrid,
    slope: f64,
) -> Result<(FeatureGrid, FeatureGrid, FeatureGrid, FeatureGrid)> {
    let e = affine_pointwise(&block.embed, embedding)?;
    let a = add_broadcast(h, &e);
    let z1 = affine_pointwise(&block.first, &a)?;
    let a1 = leaky_relu(&z1, slope);
    let mut r = affine_pointwise(&block.second, &a1)?;
    r.add_assign(&a)?;
    Ok((a, z1, a1, r))
}

fn check_input(params: &DsnoParams, x: &FeatureGrid, times: &[f64]) -> Result<()> {
    let cfg = &params.config;
    if x.len() != 1 || x.channels() != cfg.dim {
        return Err(Error::shape("dsno input", format!("batch x 1 x {}", cfg.dim), format!("{:?}", x.shape())));
    }
    if times.len() != cfg.resolution {
        return Err(Error::Config(format!(
            "grid has {} times but the model was built for M = {}",
            times.len(),
            cfg.resolution
        )));
    }
    Ok(())
}

/// Batched forward pass: `x` is `batch × 1 × d`, one row per initial
/// condition; all `M` grid rows are produced in a single pass.
pub fn forward_traced(params: &DsnoParams, x: &FeatureGrid, times: &[f64]) -> Result<ForwardTrace> {
    check_input(params, x, times)?;
    let cfg = params.config;
    let m = times.len();
    let positions = integer_positions(m);
    let embedding = embedding_grid(times, cfg.embed)?;
    let mut h = affine_pointwise(&params.lift, x)?.repeat_rows(m);
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (a, z1, a1, r) = pointwise_block(block, &h, &embedding, cfg.slope)?;
        let branch = spectral_branch(&block.kernel, &r, &positions)?;
        h = activate_residual(&r, &branch.values, cfg.slope)?;
        blocks.push(BlockCache { a, z1, a1, r, branch });
    }
    let output = affine_pointwise(&params.project, &h)?;
    Ok(ForwardTrace {
        lift_applications: x.batch(),
        projected_rows: output.rows(),
        x: x.clone(),
        embedding,
        blocks,
        last_hidden: h,
        output,
    })
}

/// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output`.
pub fn backward(
    params: &DsnoParams,
    trace: &ForwardTrace,
    grad_output: &FeatureGrid,
    grads: &mut DsnoParams,
) -> Result<()> {
    if grad_output.shape() != trace.output.shape() {
        return Err(Error::shape(
            "dsno backward",
            format!("{:?}", trace.output.shape()),
            format!("{:?}", grad_output.shape()),
        ));
    }
    let slope = params.config.slope;
    let mut grad_h = affine_backward(&params.project, &trace.last_hidden, grad_output, &mut grads.project)?;
    for ((block, cache), grad_block) in params
        .blocks
        .iter()
        .zip(&trace.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        let m = cache.r.len();
        let mut grad_r = branch_backward(&block.kernel, &cache.branch, m, &grad_h, slope, &mut grad_block.kernel)?;
        grad_r.add_assign(&grad_h)?;

        let grad_a1 = affine_backward(&block.second, &cache.a1, &grad_r, &mut grad_block.second)?;
        let grad_z1 = leaky_relu_backward(&cache.z1, &grad_a1, slope);
        let mut grad_a = affine_backward(&block.first, &cache.a, &grad_z1, &mut grad_block.first)?;
        grad_a.add_assign(&grad_r)?;

        // The embedding projection is shared by every sample in the batch.
        let mut grad_e = FeatureGrid::zeros(1, m, grad_a.channels());
        for b in 0..grad_a.batch() {
            for t in 0..m {
                for (g, v) in grad_e.row_mut(0, t).iter_mut().zip(grad_a.row(b, t)) {
                    *g += v;
                }
            }
        }
        affine_backward(&block.embed, &trace.embedding, &grad_e, &mut grad_block.embed)?;
        grad_h = grad_a;
    }
    // Every row of a sample shares the single lifted vector.
    let mut grad_lift = FeatureGrid::zeros(grad_h.batch(), 1, grad_h.channels());
    for b in 0..grad_h.batch() {
        for t in 0..grad_h.len() {
            for (g, v) in grad_lift.row_mut(b, 0).iter_mut().zip(grad_h.row(b, t)) {
                *g += v;
            }
        }
    }
    affine_backward(&params.lift, &trace.x, &grad_lift, &mut grads.lift)?;
    Ok(())
}

/// Predicted `M × d` trajectory for one initial condition.
pub fn forward(params: &DsnoParams, x_t: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    let x = FeatureGrid::from_vec(1, 1, x_t.len(), x_t.to_vec())?;
    Ok(forward_traced(params, &x, grid.times())?.output.into_vec())
}

/// Forward over `n` initial conditions (row-major `n × d`), returning
/// `n × M × d`. Chunks run in parallel; results keep input order.
pub fn forward_batch(params: &DsnoParams, xs: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    const CHUNK: usize = 512;
    let d = params.config.dim;
    if !xs.len().is_multiple_of(d) {
        return Err(Error::shape("forward_batch", format!("multiple of {d}"), xs.len()));
    }
    let parts = xs
        .par_chunks(CHUNK * d)
        .map(|chunk| {
            let x = FeatureGrid::from_vec(chunk.len() / d, 1, d, chunk.to_vec())?;
            Ok(forward_traced(params, &x, grid.times())?.output.into_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Maps query times onto fractional positions of the training grid's
/// index coordinate by piecewise-linear interpolation. Grid times map to
/// their exact integer index.
pub fn query_positions(grid: &TimeGrid, times: &[f64]) -> Result<Vec<f64>> {
    let g = grid.times();
    times
        .iter()
        .map(|&t| {
            if !(t.is_finite() && t <= grid.start() && t >= grid.end()) {
                return Err(Error::Domain {
                    what: "query time",
                    value: t,
                    range: format!("[{}, {}]", grid.end(), grid.start()),
                });
            }
            if let Some(i) = g.iter().position(|&gt| gt == t) {
                return Ok(i as f64);
            }
            let k = g.windows(2).position(|w| w[0] > t && t > w[1]).expect("t lies inside the grid");
            Ok(k as f64 + (g[k] - t) / (g[k] - g[k + 1]))
        })
        .collect()
}

/// Query-stream outputs together with each block's spectral coefficients.
pub struct QueryTrace {
    /// `Q × d`.
    pub output: FeatureGrid,
    pub positions: Vec<f64>,
    /// Per block: the mixed modes `R·F u` of the grid stream and `K u`
    /// evaluated at the query positions.
    pub branches: Vec<(ModeCoeffs, FeatureGrid)>,
}

/// Decodes the trajectory at arbitrary times in `[grid.end(), grid.start()]`.
///
/// The training-grid stream runs exactly as in [`forward`]; a second stream
/// carries the query rows through the same pointwise blocks, and each
/// temporal conv evaluates the grid stream's Fourier coefficients at the
/// query positions.
pub fn query_traced(params: &DsnoParams, x_t: &[f64], grid: &TimeGrid, times: &[f64]) -> Result<QueryTrace> {
    let cfg = params.config;
    let x = FeatureGrid::from_vec(1, 1, x_t.len(), x_t.to_vec())?;
    check_input(params, &x, grid.times())?;
    let positions = query_positions(grid, times)?;
    let grid_positions = integer_positions(grid.len());
    let grid_embedding = embedding_grid(grid.times(), cfg.embed)?;
    let query_embedding = embedding_grid(times, cfg.embed)?;

    let lifted = affine_pointwise(&params.lift, &x)?;
    let mut h = lifted.repeat_rows(grid.len());
    let mut hq = lifted.repeat_rows(times.len());
    let mut branches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (_, _, _, r) = pointwise_block(block, &h, &grid_embedding, cfg.slope)?;
        let (_, _, _, rq) = pointwise_block(block, &hq, &query_embedding, cfg.slope)?;
        let branch = spectral_branch(&block.kernel, &r, &grid_positions)?;
        let at_query = idft_at(&branch.mixed, grid.len(), &positions)?;
        h = activate_residual(&r, &branch.values, cfg.slope)?;
        hq = activate_residual(&rq, &at_query, cfg.slope)?;
        branches.push((branch.mixed, at_query));
    }
    Ok(QueryTrace {
        output: affine_pointwise(&params.project, &hq)?,
        positions,
        branches,
    })
}

/// `len(times) × d` predictions at the query times.
pub fn query_at(params: &DsnoParams, x_t: &[f64], grid: &TimeGrid, times: &[f64]) -> Result<Vec<f64>> {
    Ok(query_traced(params, x_t, grid, times)?.output.into_vec())
}
