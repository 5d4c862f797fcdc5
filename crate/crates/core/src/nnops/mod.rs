//! Differentiable building blocks of the operator network.
//!
//! Each forward op has a matching `*_backward` that maps an output gradient
//! to input gradients and accumulates parameter gradients. Temporal ops act
//! along the sample index of each grid, channels are independent.

mod fourier;
mod gemm;
mod gradcheck;

pub use fourier::{
    dft_backward, dft_truncated, hermitian_weight, idft_at, idft_at_backward, max_modes,
    mode_multiply, mode_multiply_backward, ModeCoeffs, SpectralKernel,
};
pub use gradcheck::{grad_check, GradCheck};

pub(crate) use gemm::{gemm, View, ViewMut};

use crate::error::{Error, Result};

/// A stack of `batch` feature grids, each `len × channels`, stored
/// `[batch][len][channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    batch: usize,
    len: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(batch: usize, len: usize, channels: usize) -> Self {
        Self {
            batch,
            len,
            channels,
            data: vec![0.0; batch * len * channels],
        }
    }

    pub fn from_vec(batch: usize, len: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * len * channels {
            return Err(Error::shape("FeatureGrid", batch * len * channels, data.len()));
        }
        Ok(Self {
            batch,
            len,
            channels,
            data,
        })
    }

    /// A single `len × channels` grid.
    pub fn single(len: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(1, len, channels, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Total number of rows across the batch.
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, b: usize, m: usize, c: usize) -> f64 {
        self.data[(b * self.len + m) * self.channels + c]
    }

    pub fn row(&self, b: usize, m: usize) -> &[f64] {
        let start = (b * self.len + m) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn row_mut(&mut self, b: usize, m: usize) -> &mut [f64] {
        let start = (b * self.len + m) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.batch == other.batch && self.len == other.len && self.channels == other.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.len, self.channels)
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "FeatureGrid::add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Repeats every row of a `len == 1` grid `times` times along the
    /// temporal axis.
    pub fn repeat_rows(&self, times: usize) -> Self {
        let mut out = Self::zeros(self.batch, self.len * times, self.channels);
        for b in 0..self.batch {
            for m in 0..self.len {
                for r in 0..times {
                    out.row_mut(b, m * times + r).copy_from_slice(self.row(b, m));
                }
            }
        }
        out
    }
}

/// Sinusoidal embedding `[sin(ω_k t)…, cos(ω_k t)…]` with
/// `ω_k = 10⁴^(−k/(E/2 − 1))`.
pub fn time_embedding(t: f64, width: usize) -> Result<Vec<f64>> {
    if width < 2 || !width.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "time embedding width must be even and at least 2 (got {width})"
        )));
    }
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let omega = if half == 1 {
            1.0
        } else {
            (-(k as f64) * 10_000f64.ln() / (half - 1) as f64).exp()
        };
        out[k] = (omega * t).sin();
        out[half + k] = (omega * t).cos();
    }
    Ok(out)
}

/// Pointwise affine map `y = W x + b` applied to every row; `weight` is
/// row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn identity(width: usize) -> Self {
        let mut a = Self::zeros(width, width);
        for i in 0..width {
            a.weight[i * width + i] = 1.0;
        }
        a
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn affine_pointwise(affine: &Affine, u: &FeatureGrid) -> Result<FeatureGrid> {
    if u.channels != affine.inputs {
        return Err(Error::shape("affine_pointwise", affine.inputs, u.channels));
    }
    let rows = u.rows();
    let mut out = FeatureGrid::zeros(u.batch, u.len, affine.outputs);
    for r in 0..rows {
        out.data[r * affine.outputs..(r + 1) * affine.outputs].copy_from_slice(&affine.bias);
    }
    gemm(
        rows,
        affine.inputs,
        affine.outputs,
        1.0,
        View::rows(&u.data, affine.inputs),
        View::transposed(&affine.weight, affine.inputs),
        1.0,
        ViewMut::rows(&mut out.data, affine.outputs),
    );
    Ok(out)
}

/// Accumulates `∂L/∂W`, `∂L/∂b` into `grad` and returns `∂L/∂u`.
pub fn affine_backward(
    affine: &Affine,
    u: &FeatureGrid,
    grad_out: &FeatureGrid,
    grad: &mut Affine,
) -> Result<FeatureGrid> {
    if grad_out.channels != affine.outputs || grad_out.rows() != u.rows() {
        return Err(Error::shape(
            "affine_backward",
            format!("{} x {}", u.rows(), affine.outputs),
            format!("{} x {}", grad_out.rows(), grad_out.channels),
        ));
    }
    let rows = u.rows();
    // dW += dYᵀ U
    gemm(
        affine.outputs,
        rows,
        affine.inputs,
        1.0,
        View::transposed(&grad_out.data, affine.outputs),
        View::rows(&u.data, affine.inputs),
        1.0,
        ViewMut::rows(&mut grad.weight, affine.inputs),
    );
    for r in 0..rows {
        let g = &grad_out.data[r * affine.outputs..(r + 1) * affine.outputs];
        for (b, gi) in grad.bias.iter_mut().zip(g) {
            *b += gi;
        }
    }
    // dU = dY W
    let mut grad_in = FeatureGrid::zeros(u.batch, u.len, affine.inputs);
    gemm(
        rows,
        affine.outputs,
        affine.inputs,
        1.0,
        View::rows(&grad_out.data, affine.outputs),
        View::rows(&affine.weight, affine.inputs),
        0.0,
        ViewMut::rows(&mut grad_in.data, affine.inputs),
    );
    Ok(grad_in)
}

pub fn leaky_relu_scalar(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu(u: &FeatureGrid, slope: f64) -> FeatureGrid {
    let mut out = u.clone();
    for v in &mut out.data {
        *v = leaky_relu_scalar(*v, slope);
    }
    out
}

/// Gradient through the activation, given its pre-activation input.
pub fn leaky_relu_backward(input: &FeatureGrid, grad_out: &FeatureGrid, slope: f64) -> FeatureGrid {
    let mut out = grad_out.clone();
    for (g, x) in out.data.iter_mut().zip(&input.data) {
        if *x < 0.0 {
            *g *= slope;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, batch: usize, len: usize, channels: usize) -> FeatureGrid {
        let data = (0..batch * len * channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureGrid::from_vec(batch, len, channels, data).unwrap()
    }

    fn random_affine(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Affine {
        Affine {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: (0..outputs).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn embedding_examples() {
        let e = time_embedding(0.0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        for t in [0.1, 0.5, 3.0, -2.0] {
            let e = time_embedding(t, 32).unwrap();
            let norm2: f64 = e.iter().map(|v| v * v).sum();
            assert!((norm2 - 16.0).abs() < 1e-12);
        }
        let e2 = time_embedding(0.7, 2).unwrap();
        assert_eq!(e2, vec![0.7f64.sin(), 0.7f64.cos()]);
        assert!(time_embedding(0.1, 3).is_err());
        assert!(time_embedding(0.1, 0).is_err());
    }

    #[test]
    fn embeddings_of_quadratic_grid_are_distinct() {
        let times = [1.0, 0.563_062_5, 0.250_75, 0.063_437_5];
        let embs: Vec<_> = times.iter().map(|t| time_embedding(*t, 32).unwrap()).collect();
        let mut min = f64::INFINITY;
        for i in 0..4 {
            for j in i + 1..4 {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.1, "min pairwise distance {min}");
    }

    #[test]
    fn affine_identity_and_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_grid(&mut rng, 2, 3, 4);
        assert_eq!(affine_pointwise(&Affine::identity(4), &u).unwrap(), u);
        let mut a = random_affine(&mut rng, 4, 5);
        a.weight.iter_mut().for_each(|w| *w = 0.0);
        let zero = FeatureGrid::zeros(2, 3, 4);
        let out = affine_pointwise(&a, &zero).unwrap();
        for r in 0..6 {
            assert_eq!(&out.data()[r * 5..(r + 1) * 5], a.bias.as_slice());
        }
        assert!(affine_pointwise(&a, &FeatureGrid::zeros(1, 1, 3)).is_err());
    }

    #[test]
    fn affine_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_grid(&mut rng, 3, 4, 7);
        let a = random_affine(&mut rng, 7, 5);
        let out = affine_pointwise(&a, &u).unwrap();
        for b in 0..3 {
            for m in 0..4 {
                for o in 0..5 {
                    let mut acc = a.bias[o];
                    for i in 0..7 {
                        acc += a.weight[o * 7 + i] * u.get(b, m, i);
                    }
                    assert!((out.get(b, m, o) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_grid(&mut rng, 2, 3, 4);
        let a = random_affine(&mut rng, 4, 3);
        let w = random_grid(&mut rng, 2, 3, 3);
        // L = Σ w ⊙ affine(u)
        let loss = |a: &Affine, u: &FeatureGrid| -> f64 {
            let y = affine_pointwise(a, u).unwrap();
            y.data().iter().zip(w.data()).map(|(p, q)| p * q).sum()
        };
        let mut grad = Affine::zeros(4, 3);
        let gu = affine_backward(&a, &u, &w, &mut grad).unwrap();

        let params: Vec<f64> = a.weight.iter().chain(&a.bias).chain(u.data()).copied().collect();
        let split = |p: &[f64]| {
            let aff = Affine {
                inputs: 4,
                outputs: 3,
                weight: p[..12].to_vec(),
                bias: p[12..15].to_vec(),
            };
            let grid = FeatureGrid::from_vec(2, 3, 4, p[15..].to_vec()).unwrap();
            (aff, grid)
        };
        let analytic: Vec<f64> =
            grad.weight.iter().chain(&grad.bias).chain(gu.data()).copied().collect();
        let err = grad_check(
            |p| {
                let (aff, grid) = split(p);
                Ok((loss(&aff, &grid), analytic.clone()))
            },
            &params,
            GradCheck::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn leaky_relu_examples() {
        assert_eq!(leaky_relu_scalar(0.0, 0.01), 0.0);
        assert_eq!(leaky_relu_scalar(-1.0, 0.01), -0.01);
        assert_eq!(leaky_relu_scalar(2.5, 0.01), 2.5);
        let u = FeatureGrid::single(1, 3, vec![-2.0, 0.0, 3.0]).unwrap();
        let g = FeatureGrid::single(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(leaky_relu_backward(&u, &g, 0.1).data(), &[0.1, 1.0, 1.0]);
    }

    #[test]
    fn repeat_rows_replicates() {
        let g = FeatureGrid::from_vec(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = g.repeat_rows(3);
        assert_eq!(r.shape(), (2, 3, 2));
        assert_eq!(r.row(0, 2), &[1.0, 2.0]);
        assert_eq!(r.row(1, 0), &[3.0, 4.0]);
    }

    proptest! {
        #[test]
        fn leaky_relu_is_monotone(x in -100.0..100.0f64, y in -100.0..100.0f64) {
            prop_assume!(x < y);
            prop_assert!(leaky_relu_scalar(x, 0.01) < leaky_relu_scalar(y, 0.01));
        }
    }
}
