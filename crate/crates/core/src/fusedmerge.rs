//! Two-pass closed-form backward of the MV-Split merge followed by RMSNorm.
//!
//! The forward keeps only the trunk `x`, the branch `f`, the gates and the
//! per-segment means. The pre-normalization state `z` is recomputed one row
//! at a time in both backward passes and never stored:
//!
//! * Pass A rebuilds `z_i`, forms the RMSNorm adjoint
//!   `Δ_i = r_i G_i − z_i (r_i³/D)⟨G_i, z_i⟩`, and accumulates the segment
//!   mean adjoint `Δ̄` plus the gate partial sums.
//! * Pass B rebuilds `Δ_i` and emits `dx_i = Δ_i − α⊙Δ̄` and
//!   `df_i = β⊙Δ_i + (α − β)⊙Δ̄`.

use std::ops::Range;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{inv_rms, rmsnorm_backward_with, Matrix};
use crate::subspace::SegmentLayout;

/// Per-segment statistics, one row per segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentStats {
    pub mean_adjoint: Matrix,
    pub x_mean: Matrix,
    pub f_mean: Matrix,
}

/// Everything the backward needs. No `T×D` array other than `x` and `f`.
#[derive(Clone, Debug)]
pub struct MergeCache {
    pub x: Matrix,
    pub f: Matrix,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub layout: SegmentLayout,
    /// `S×D` segment means of `x` and `f`.
    pub x_mean: Matrix,
    pub f_mean: Matrix,
    pub eps: f64,
}

impl MergeCache {
    /// Shapes of every stored array, for memory-contract assertions.
    pub fn array_shapes(&self) -> Vec<(&'static str, (usize, usize))> {
        vec![
            ("x", self.x.shape()),
            ("f", self.f.shape()),
            ("alpha", (1, self.alpha.len())),
            ("beta", (1, self.beta.len())),
            ("x_mean", self.x_mean.shape()),
            ("f_mean", self.f_mean.shape()),
        ]
    }

    fn segments(&self) -> Vec<Range<usize>> {
        self.layout.segments()
    }

    /// Pre-normalization row `z_i` of token `i` in segment `s`.
    fn z_row(&self, i: usize, s: usize, out: &mut [f64]) {
        let (x, f) = (self.x.row(i), self.f.row(i));
        let (xm, fm) = (self.x_mean.row(s), self.f_mean.row(s));
        for d in 0..out.len() {
            out[d] = x[d] + self.beta[d] * (f[d] - fm[d]) + self.alpha[d] * (fm[d] - xm[d]);
        }
    }

    fn delta_row(&self, i: usize, s: usize, g: &[f64], z: &mut [f64]) -> Vec<f64> {
        self.z_row(i, s, z);
        rmsnorm_backward_with(z, g, inv_rms(z, self.eps))
    }
}

#[derive(Clone, Debug)]
pub struct FusedGrads {
    pub dx: Matrix,
    pub df: Matrix,
    pub d_alpha: Vec<f64>,
    pub d_beta: Vec<f64>,
    pub stats: SegmentStats,
}

fn segment_means(m: &Matrix, segments: &[Range<usize>]) -> Matrix {
    let mut out = Matrix::zeros(segments.len(), m.cols());
    for (s, seg) in segments.iter().enumerate() {
        out.row_mut(s).copy_from_slice(&m.col_mean_range(seg.start, seg.end));
    }
    out
}

pub fn fused_merge_forward(
    x: &Matrix,
    f: &Matrix,
    alpha: &[f64],
    beta: &[f64],
    layout: &SegmentLayout,
    eps: f64,
) -> Result<(Matrix, MergeCache)> {
    if x.shape() != f.shape() {
        return Err(dim_err(
            "fused_merge_forward",
            format!("trunk {:?} vs branch {:?}", x.shape(), f.shape()),
        ));
    }
    if alpha.len() != x.cols() || beta.len() != x.cols() {
        return Err(dim_err(
            "fused_merge_forward",
            format!("gates {}/{} for width {}", alpha.len(), beta.len(), x.cols()),
        ));
    }
    layout.check(x.rows())?;
    let segments = layout.segments();
    let cache = MergeCache {
        x: x.clone(),
        f: f.clone(),
        alpha: alpha.to_vec(),
        beta: beta.to_vec(),
        layout: *layout,
        x_mean: segment_means(x, &segments),
        f_mean: segment_means(f, &segments),
        eps,
    };
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for (s, seg) in segments.iter().enumerate() {
        for i in seg.clone() {
            let row = out.row_mut(i);
            cache.z_row(i, s, row);
            let r = inv_rms(row, eps);
            row.iter_mut().for_each(|v| *v *= r);
        }
    }
    Ok((out, cache))
}

pub fn fused_merge_backward(cache: &MergeCache, upstream: &Matrix) -> Result<FusedGrads> {
    if upstream.shape() != cache.x.shape() {
        return Err(Error::LayoutMismatch {
            expected: cache.x.rows(),
            actual: upstream.rows(),
        });
    }
    let d = cache.x.cols();
    let segments = cache.segments();
    let mut z = vec![0.0; d];

    // Pass A.
    let mut mean_adjoint = Matrix::zeros(segments.len(), d);
    let mut d_alpha = vec![0.0; d];
    let mut d_beta = vec![0.0; d];
    for (s, seg) in segments.iter().enumerate() {
        let (xm, fm) = (cache.x_mean.row(s), cache.f_mean.row(s));
        for i in seg.clone() {
            let delta = cache.delta_row(i, s, upstream.row(i), &mut z);
            let f = cache.f.row(i);
            let acc = mean_adjoint.row_mut(s);
            for k in 0..d {
                acc[k] += delta[k];
                d_alpha[k] += delta[k] * (fm[k] - xm[k]);
                d_beta[k] += delta[k] * (f[k] - fm[k]);
            }
        }
        let n = seg.len() as f64;
        mean_adjoint.row_mut(s).iter_mut().for_each(|v| *v /= n);
    }

    // Pass B.
    let mut dx = Matrix::zeros(cache.x.rows(), d);
    let mut df = Matrix::zeros(cache.x.rows(), d);
    for (s, seg) in segments.iter().enumerate() {
        let dbar = mean_adjoint.row(s);
        for i in seg.clone() {
            let delta = cache.delta_row(i, s, upstream.row(i), &mut z);
            let dx_row = dx.row_mut(i);
            for k in 0..d {
                dx_row[k] = delta[k] - cache.alpha[k] * dbar[k];
            }
            let df_row = df.row_mut(i);
            for k in 0..d {
                df_row[k] = cache.beta[k] * delta[k] + (cache.alpha[k] - cache.beta[k]) * dbar[k];
            }
        }
    }

    Ok(FusedGrads {
        dx,
        df,
        d_alpha,
        d_beta,
        stats: SegmentStats {
            mean_adjoint,
            x_mean: cache.x_mean.clone(),
            f_mean: cache.f_mean.clone(),
        },
    })
}
