//! Residual merge variants followed by the Post-Norm RMSNorm.

use super::config::MergeKind;
use super::params::Gates;
use crate::error::{dim_err, Result};
use crate::numerics::{rmsnorm_rows, rmsnorm_rows_backward, Matrix, RMS_EPS};
use crate::subspace::{centered_over, mean_over, scale_features, SegmentLayout};

#[derive(Clone, Debug)]
pub struct MergeOutput {
    /// Pre-normalization state.
    pub z: Matrix,
    pub x_next: Matrix,
    pub inv_rms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MergeGrads {
    pub dx: Matrix,
    pub df: Matrix,
    pub gates: Gates,
}

fn check_shapes(x: &Matrix, f: &Matrix, layout: &SegmentLayout) -> Result<()> {
    if x.shape() != f.shape() {
        return Err(dim_err(
            "residual_merge",
            format!("trunk {:?} vs branch {:?}", x.shape(), f.shape()),
        ));
    }
    layout.check(x.rows())
}

/// The pre-normalization merge `z`.
pub fn pre_norm_merge(
    x: &Matrix,
    f: &Matrix,
    gates: &Gates,
    kind: MergeKind,
    layout: &SegmentLayout,
) -> Result<Matrix> {
    check_shapes(x, f, layout)?;
    gates.check(kind)?;
    let segs = layout.segments();
    let z = match gates {
        Gates::None if kind == MergeKind::HardCentering => centered_over(&x.add(f), &segs),
        Gates::None => x.add(f),
        Gates::Scalar { lambda } => {
            let mut z = x.clone();
            z.axpy(lambda[(0, 0)], f);
            z
        }
        Gates::Channel { lambda } => x.add(&scale_features(f, lambda.data())),
        Gates::Split { alpha, beta } => {
            let centered = scale_features(&centered_over(f, &segs), beta.data());
            let mean_path = scale_features(&mean_over(&f.sub(x), &segs), alpha.data());
            x.add(&centered).add(&mean_path)
        }
    };
    Ok(z)
}

/// Merge then row-wise RMSNorm.
pub fn residual_merge(
    x: &Matrix,
    f: &Matrix,
    gates: &Gates,
    kind: MergeKind,
    layout: &SegmentLayout,
) -> Result<MergeOutput> {
    let z = pre_norm_merge(x, f, gates, kind, layout)?;
    let (x_next, inv_rms) = rmsnorm_rows(&z, RMS_EPS);
    Ok(MergeOutput { z, x_next, inv_rms })
}

/// Adjoint of [`pre_norm_merge`] for pre-normalization adjoint `g = ∂L/∂z`.
pub fn pre_norm_merge_backward(
    x: &Matrix,
    f: &Matrix,
    gates: &Gates,
    kind: MergeKind,
    layout: &SegmentLayout,
    g: &Matrix,
) -> Result<MergeGrads> {
    check_shapes(x, f, layout)?;
    gates.check(kind)?;
    let segs = layout.segments();
    let grads = match gates {
        Gates::None if kind == MergeKind::HardCentering => {
            let pg = centered_over(g, &segs);
            MergeGrads {
                dx: pg.clone(),
                df: pg,
                gates: Gates::None,
            }
        }
        Gates::None => MergeGrads {
            dx: g.clone(),
            df: g.clone(),
            gates: Gates::None,
        },
        Gates::Scalar { lambda } => MergeGrads {
            dx: g.clone(),
            df: g.scale(lambda[(0, 0)]),
            gates: Gates::Scalar {
                lambda: Matrix::filled(1, 1, g.hadamard(f).sum()),
            },
        },
        Gates::Channel { lambda } => MergeGrads {
            dx: g.clone(),
            df: scale_features(g, lambda.data()),
            gates: Gates::Channel {
                lambda: column_sums(&g.hadamard(f)),
            },
        },
        Gates::Split { alpha, beta } => {
            let jg = mean_over(g, &segs);
            let pg = g.sub(&jg);
            let a_jg = scale_features(&jg, alpha.data());
            let dx = g.sub(&a_jg);
            let df = scale_features(&pg, beta.data()).add(&a_jg);
            let d_alpha = column_sums(&g.hadamard(&mean_over(&f.sub(x), &segs)));
            let d_beta = column_sums(&g.hadamard(&centered_over(f, &segs)));
            MergeGrads {
                dx,
                df,
                gates: Gates::Split {
                    alpha: d_alpha,
                    beta: d_beta,
                },
            }
        }
    };
    Ok(grads)
}

/// Adjoint of [`residual_merge`] given the post-norm adjoint.
pub fn residual_merge_backward(
    x: &Matrix,
    f: &Matrix,
    out: &MergeOutput,
    gates: &Gates,
    kind: MergeKind,
    layout: &SegmentLayout,
    upstream: &Matrix,
) -> Result<MergeGrads> {
    let g = rmsnorm_rows_backward(&out.z, &out.inv_rms, upstream);
    pre_norm_merge_backward(x, f, gates, kind, layout, &g)
}

pub(crate) fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}
