//! One-sided real DFT over the temporal index, per-mode channel mixing and
//! evaluation of the band-limited interpolant at arbitrary positions.
//!
//! The forward transform is unnormalized; the inverse carries `1/M` and
//! counts every mode except DC and Nyquist twice (Hermitian completion).

use std::f64::consts::TAU;

use super::{gemm, FeatureGrid, View, ViewMut};
use crate::error::{Error, Result};

/// Largest admissible number of retained modes for `m` samples.
pub fn max_modes(m: usize) -> usize {
    m / 2 + 1
}

/// Multiplicity of mode `j` in the Hermitian-completed spectrum.
pub fn hermitian_weight(j: usize, m: usize) -> f64 {
    if j == 0 || (m.is_multiple_of(2) && j == m / 2) {
        1.0
    } else {
        2.0
    }
}

/// Retained Fourier coefficients of a batch of grids, `[batch][mode][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeCoeffs {
    pub batch: usize,
    pub modes: usize,
    pub channels: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ModeCoeffs {
    pub fn zeros(batch: usize, modes: usize, channels: usize) -> Self {
        let n = batch * modes * channels;
        Self {
            batch,
            modes,
            channels,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    fn idx(&self, b: usize, j: usize, c: usize) -> usize {
        (b * self.modes + j) * self.channels + c
    }

    pub fn get(&self, b: usize, j: usize, c: usize) -> (f64, f64) {
        let i = self.idx(b, j, c);
        (self.re[i], self.im[i])
    }

    pub fn set(&mut self, b: usize, j: usize, c: usize, value: (f64, f64)) {
        let i = self.idx(b, j, c);
        self.re[i] = value.0;
        self.im[i] = value.1;
    }
}

/// Complex per-mode channel-mixing kernel `R ∈ C^{J×C×C}`, `[mode][out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralKernel {
    pub modes: usize,
    pub channels: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl SpectralKernel {
    pub fn zeros(modes: usize, channels: usize) -> Self {
        let n = modes * channels * channels;
        Self {
            modes,
            channels,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    /// `R_j = I` for every mode.
    pub fn identity(modes: usize, channels: usize) -> Self {
        let mut k = Self::zeros(modes, channels);
        for j in 0..modes {
            for c in 0..channels {
                k.re[(j * channels + c) * channels + c] = 1.0;
            }
        }
        k
    }

    pub fn idx(&self, j: usize, out: usize, inp: usize) -> usize {
        (j * self.channels + out) * self.channels + inp
    }

    pub fn get(&self, j: usize, out: usize, inp: usize) -> (f64, f64) {
        let i = self.idx(j, out, inp);
        (self.re[i], self.im[i])
    }

    /// Number of real parameters (two per complex entry).
    pub fn param_count(&self) -> usize {
        2 * self.re.len()
    }
}

/// `cos` and `sin` of `2π·j·n/M` with the phase reduced modulo `M` so
/// integer positions are evaluated exactly.
fn phase(j: usize, q: f64, m: usize) -> (f64, f64) {
    let reduced = (j as f64 * q).rem_euclid(m as f64);
    let angle = TAU * reduced / m as f64;
    (angle.cos(), angle.sin())
}

/// `û_j = Σ_n u_n exp(−2πi·jn/M)` for `j < modes`, per grid and channel.
pub fn dft_truncated(u: &FeatureGrid, modes: usize) -> Result<ModeCoeffs> {
    let m = u.len();
    if modes == 0 || modes > max_modes(m) {
        return Err(Error::shape("dft_truncated", format!("1..={} modes", max_modes(m)), modes));
    }
    let c = u.channels();
    let mut out = ModeCoeffs::zeros(u.batch(), modes, c);
    let table: Vec<(f64, f64)> = (0..modes)
        .flat_map(|j| (0..m).map(move |n| phase(j, n as f64, m)))
        .collect();
    for b in 0..u.batch() {
        for j in 0..modes {
            let base = (b * modes + j) * c;
            for n in 0..m {
                let (cos, sin) = table[j * m + n];
                let row = u.row(b, n);
                let (re, im) = (&mut out.re[base..base + c], &mut out.im[base..base + c]);
                for ((r, i), x) in re.iter_mut().zip(im.iter_mut()).zip(row) {
                    *r += cos * x;
                    *i -= sin * x;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`dft_truncated`]: maps coefficient gradients (real and
/// imaginary parts as independent coordinates) back to the `len`-sample grid.
pub fn dft_backward(grad: &ModeCoeffs, len: usize) -> FeatureGrid {
    let c = grad.channels;
    let mut out = FeatureGrid::zeros(grad.batch, len, c);
    for b in 0..grad.batch {
        for n in 0..len {
            let row = out.row_mut(b, n);
            for j in 0..grad.modes {
                let (cos, sin) = phase(j, n as f64, len);
                let base = (b * grad.modes + j) * c;
                let (re, im) = (&grad.re[base..base + c], &grad.im[base..base + c]);
                for ((o, r), i) in row.iter_mut().zip(re).zip(im) {
                    *o += cos * r - sin * i;
                }
            }
        }
    }
    out
}

fn check_kernel(kernel: &SpectralKernel, u: &ModeCoeffs, op: &'static str) -> Result<()> {
    if kernel.modes != u.modes || kernel.channels != u.channels {
        return Err(Error::shape(
            op,
            format!("{} modes x {} channels", kernel.modes, kernel.channels),
            format!("{} modes x {} channels", u.modes, u.channels),
        ));
    }
    Ok(())
}

/// `(R·û)_{j,k} = Σ_l R_{j,k,l} û_{j,l}`.
pub fn mode_multiply(kernel: &SpectralKernel, u: &ModeCoeffs) -> Result<ModeCoeffs> {
    check_kernel(kernel, u, "mode_multiply")?;
    let (b, jn, c) = (u.batch, u.modes, u.channels);
    let mut out = ModeCoeffs::zeros(b, jn, c);
    let rs = jn * c;
    for j in 0..jn {
        let ko = j * c * c;
        let uo = j * c;
        let ur = View { data: &u.re, offset: uo, rs, cs: 1 };
        let ui = View { data: &u.im, offset: uo, rs, cs: 1 };
        // Rᵀ_j: element (l, k) = R[j][k][l]
        let rr = View { data: &kernel.re, offset: ko, rs: 1, cs: c };
        let ri = View { data: &kernel.im, offset: ko, rs: 1, cs: c };
        gemm(b, c, c, 1.0, ur, rr, 0.0, ViewMut { data: &mut out.re, offset: uo, rs, cs: 1 });
        gemm(b, c, c, -1.0, ui, ri, 1.0, ViewMut { data: &mut out.re, offset: uo, rs, cs: 1 });
        gemm(b, c, c, 1.0, ur, ri, 0.0, ViewMut { data: &mut out.im, offset: uo, rs, cs: 1 });
        gemm(b, c, c, 1.0, ui, rr, 1.0, ViewMut { data: &mut out.im, offset: uo, rs, cs: 1 });
    }
    Ok(out)
}

/// Accumulates `∂L/∂R = G·conj(û)ᵀ` into `grad_kernel` and returns
/// `∂L/∂û = conj(R)ᵀ·G`.
pub fn mode_multiply_backward(
    kernel: &SpectralKernel,
    u: &ModeCoeffs,
    grad_out: &ModeCoeffs,
    grad_kernel: &mut SpectralKernel,
) -> Result<ModeCoeffs> {
    check_kernel(kernel, u, "mode_multiply_backward")?;
    check_kernel(kernel, grad_out, "mode_multiply_backward")?;
    let (b, jn, c) = (u.batch, u.modes, u.channels);
    let mut grad_in = ModeCoeffs::zeros(b, jn, c);
    let rs = jn * c;
    for j in 0..jn {
        let ko = j * c * c;
        let uo = j * c;
        let gr = View { data: &grad_out.re, offset: uo, rs, cs: 1 };
        let gi = View { data: &grad_out.im, offset: uo, rs, cs: 1 };
        let ur = View { data: &u.re, offset: uo, rs, cs: 1 };
        let ui = View { data: &u.im, offset: uo, rs, cs: 1 };
        let rr = View { data: &kernel.re, offset: ko, rs: c, cs: 1 };
        let ri = View { data: &kernel.im, offset: ko, rs: c, cs: 1 };

        // ∂û: re = Gr·Rr + Gi·Ri, im = Gi·Rr − Gr·Ri
        gemm(b, c, c, 1.0, gr, rr, 0.0, ViewMut { data: &mut grad_in.re, offset: uo, rs, cs: 1 });
        gemm(b, c, c, 1.0, gi, ri, 1.0, ViewMut { data: &mut grad_in.re, offset: uo, rs, cs: 1 });
        gemm(b, c, c, 1.0, gi, rr, 0.0, ViewMut { data: &mut grad_in.im, offset: uo, rs, cs: 1 });
        gemm(b, c, c, -1.0, gr, ri, 1.0, ViewMut { data: &mut grad_in.im, offset: uo, rs, cs: 1 });

        // ∂R: re += Grᵀ·Ur + Giᵀ·Ui, im += Giᵀ·Ur − Grᵀ·Ui
        let grt = View { data: &grad_out.re, offset: uo, rs: 1, cs: rs };
        let git = View { data: &grad_out.im, offset: uo, rs: 1, cs: rs };
        gemm(c, b, c, 1.0, grt, ur, 1.0, ViewMut { data: &mut grad_kernel.re, offset: ko, rs: c, cs: 1 });
        gemm(c, b, c, 1.0, git, ui, 1.0, ViewMut { data: &mut grad_kernel.re, offset: ko, rs: c, cs: 1 });
        gemm(c, b, c, 1.0, git, ur, 1.0, ViewMut { data: &mut grad_kernel.im, offset: ko, rs: c, cs: 1 });
        gemm(c, b, c, -1.0, grt, ui, 1.0, ViewMut { data: &mut grad_kernel.im, offset: ko, rs: c, cs: 1 });
    }
    Ok(grad_in)
}

fn check_queries(m: usize, query: &[f64]) -> Result<()> {
    for &q in query {
        if !(q.is_finite() && q >= 0.0 && q < m as f64) {
            return Err(Error::Domain {
                what: "query position",
                value: q,
                range: format!("[0, {m})"),
            });
        }
    }
    Ok(())
}

/// Evaluates `u(q) = (1/M)·Re Σ_j w_j v_j exp(2πi·jq/M)` at each query
/// position, `w_j` the Hermitian multiplicity.
pub fn idft_at(v: &ModeCoeffs, m: usize, query: &[f64]) -> Result<FeatureGrid> {
    if v.modes > max_modes(m) {
        return Err(Error::shape("idft_at", format!("<= {} modes", max_modes(m)), v.modes));
    }
    check_queries(m, query)?;
    let c = v.channels;
    let mut out = FeatureGrid::zeros(v.batch, query.len(), c);
    let scale = 1.0 / m as f64;
    let table: Vec<(f64, f64)> = query
        .iter()
        .flat_map(|&q| {
            (0..v.modes).map(move |j| {
                let (cos, sin) = phase(j, q, m);
                let w = hermitian_weight(j, m) * scale;
                (w * cos, w * sin)
            })
        })
        .collect();
    for b in 0..v.batch {
        for (qi, _) in query.iter().enumerate() {
            let row = out.row_mut(b, qi);
            for j in 0..v.modes {
                let (wc, ws) = table[qi * v.modes + j];
                let base = (b * v.modes + j) * c;
                let (re, im) = (&v.re[base..base + c], &v.im[base..base + c]);
                for ((o, r), i) in row.iter_mut().zip(re).zip(im) {
                    *o += wc * r - ws * i;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`idft_at`] with respect to the coefficients.
pub fn idft_at_backward(grad_out: &FeatureGrid, m: usize, query: &[f64], modes: usize) -> Result<ModeCoeffs> {
    check_queries(m, query)?;
    if grad_out.len() != query.len() {
        return Err(Error::shape("idft_at_backward", query.len(), grad_out.len()));
    }
    let c = grad_out.channels();
    let mut out = ModeCoeffs::zeros(grad_out.batch(), modes, c);
    let scale = 1.0 / m as f64;
    for b in 0..grad_out.batch() {
        for (qi, &q) in query.iter().enumerate() {
            let g = grad_out.row(b, qi);
            for j in 0..modes {
                let (cos, sin) = phase(j, q, m);
                let w = hermitian_weight(j, m) * scale;
                let base = (b * modes + j) * c;
                let (re, im) = (&mut out.re[base..base + c], &mut out.im[base..base + c]);
                for ((r, i), x) in re.iter_mut().zip(im.iter_mut()).zip(g) {
                    *r += w * cos * x;
                    *i -= w * sin * x;
                }
            }
        }
    }
    Ok(out)
}
