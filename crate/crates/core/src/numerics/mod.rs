//! Dense kernels: matrix products, softmax, RMSNorm and their adjoints,
//! a seeded RNG, and a central-difference gradient checker.

mod matrix;

pub use matrix::{cosine, dot, norm, Matrix};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{dim_err, Error, Result};

/// RMSNorm epsilon used throughout the model.
pub const RMS_EPS: f64 = 1e-6;

/// Seeded ChaCha8 stream. ChaCha is counter-based, so `substream` gives
/// independent, reproducible streams keyed by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A fresh generator for `(seed, stream)`, independent of this one's
    /// position.
    pub fn substream(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng { seed: self.seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| std * self.normal())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform_range(lo, hi))
    }
}

/// Checked matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(dim_err(
            "matmul",
            format!("{}x{} · {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    Ok(a.mul(b))
}

/// Softmax of one row, computed with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn row_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// `J_sm(a) · upstream` with `J_sm(a) = diag(a) − a aᵀ`.
pub fn softmax_jvp(a: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner = dot(a, upstream);
    a.iter().zip(upstream).map(|(ai, ui)| ai * (ui - inner)).collect()
}

/// Non-affine RMSNorm of one row. Returns the normalized row and the
/// inverse-RMS factor `r = (‖x‖²/D + eps)^(-1/2)`.
pub fn rmsnorm_forward(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let r = inv_rms(x, eps);
    (x.iter().map(|v| v * r).collect(), r)
}

#[inline]
pub fn inv_rms(x: &[f64], eps: f64) -> f64 {
    let ms = dot(x, x) / x.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// Adjoint of [`rmsnorm_forward`]: `r·g − x·(r³/D)⟨g, x⟩`.
pub fn rmsnorm_backward(x: &[f64], upstream: &[f64], eps: f64) -> Vec<f64> {
    let r = inv_rms(x, eps);
    rmsnorm_backward_with(x, upstream, r)
}

/// Same as [`rmsnorm_backward`] with a precomputed inverse RMS.
#[inline]
pub fn rmsnorm_backward_with(x: &[f64], upstream: &[f64], r: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let c = r * r * r / d * dot(upstream, x);
    x.iter().zip(upstream).map(|(xi, gi)| r * gi - xi * c).collect()
}

/// Row-wise RMSNorm of a matrix; returns the output and per-row inverse RMS.
pub fn rmsnorm_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let f = inv_rms(x.row(r), eps);
        out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        inv.push(f);
    }
    (out, inv)
}

pub fn rmsnorm_rows_backward(x: &Matrix, inv: &[f64], upstream: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let g = rmsnorm_backward_with(x.row(r), upstream.row(r), inv[r]);
        out.row_mut(r).copy_from_slice(&g);
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    /// Largest per-entry relative error.
    pub max_rel_error: f64,
    /// Index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Difference formula used by [`finite_difference_check_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error `O(h²)`.
    Central,
    /// Five-point central formula, error `O(h⁴)`.
    FourthOrder,
}

/// Compares `analytic` against central differences of `f` at `point`.
///
/// Relative error per entry is `|a − n| / max(|a|, |n|, floor)` where the
/// floor is `1e-3 · max_j |a_j|` (plus `1e-12`), so entries that are tiny
/// relative to the block are judged on the block's scale.
pub fn finite_difference_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64, tolerance: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
{
    finite_difference_check_with(f, point, analytic, step, tolerance, Stencil::Central)
}

/// [`finite_difference_check`] with a chosen difference formula.
pub fn finite_difference_check_with<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
    stencil: Stencil,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(dim_err(
            "finite_difference_check",
            format!("{} coordinates vs {} gradient entries", point.len(), analytic.len()),
        ));
    }
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale + 1e-12;
    let mut probe = point.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: point.len(),
        passed: true,
    };
    for i in 0..point.len() {
        let orig = probe[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe[i] = orig + offset;
            let v = f(&probe);
            probe[i] = orig;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!(
                    "finite_difference_check: f evaluation at coordinate {i}"
                )))
            }
        };
        let numeric = match stencil {
            Stencil::Central => (at(step)? - at(-step)?) / (2.0 * step),
            Stencil::FourthOrder => {
                let (p1, m1) = (at(step)?, at(-step)?);
                let (p2, m2) = (at(2.0 * step)?, at(-2.0 * step)?);
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step)
            }
        };
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

/// Pivots below this fraction of their original diagonal entry are treated
/// as rank deficiency.
const PIVOT_RTOL: f64 = 1e-12;

/// Solves `A x = b` for symmetric positive-definite `A` via Cholesky.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(dim_err("solve_spd", format!("{}x{} with rhs {}", n, a.cols(), b.len())));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= PIVOT_RTOL * a[(j, j)].abs() || !d.is_finite() {
            return Err(Error::Singular(format!("non-positive pivot {d:e} at column {j}")));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}
