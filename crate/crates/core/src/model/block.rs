//! One Post-Norm block: attention merge + norm, then FFN merge + norm.

use super::attention::{attention_backward, attention_forward, AttnTape};
use super::config::{MergeKind, ModelConfig};
use super::ffn::{ffn_backward, ffn_forward, FfnTape};
use super::merge::{pre_norm_merge, pre_norm_merge_backward, residual_merge, MergeGrads};
use super::params::{BlockParams, Gates};
use super::rope::Rope;
use crate::error::{Error, Result};
use crate::fusedmerge::{fused_merge_backward, fused_merge_forward, MergeCache};
use crate::numerics::{rmsnorm_rows_backward, Matrix, RMS_EPS};

/// What a merge keeps for its backward.
#[derive(Clone, Debug)]
pub enum MergeTape {
    /// Composed path: the pre-norm state and its inverse RMS factors.
    Composed { z: Matrix, inv_rms: Vec<f64> },
    /// Closed-form path: trunk, branch, gates and segment means only.
    Fused(MergeCache),
}

#[derive(Clone, Debug)]
pub struct SublayerTape {
    pub kind: MergeKind,
    /// Branch output `f`.
    pub branch: Matrix,
    pub merge: MergeTape,
    /// Post-norm output of this sublayer.
    pub out: Matrix,
}

#[derive(Clone, Debug)]
pub struct BlockTape {
    pub x: Matrix,
    pub attn: AttnTape,
    pub attn_merge: SublayerTape,
    pub ffn: FfnTape,
    pub ffn_merge: SublayerTape,
}

impl BlockTape {
    pub fn output(&self) -> &Matrix {
        &self.ffn_merge.out
    }

    /// Output of the attention sublayer, input of the FFN sublayer.
    pub fn mid(&self) -> &Matrix {
        &self.attn_merge.out
    }
}

/// Per-token writer inputs `y_t` and output adjoints `δ_t`, so that the
/// writer gradient is `Σ_t y_t δ_tᵀ`.
#[derive(Clone, Debug)]
pub struct WriterTap {
    pub y: Matrix,
    pub delta: Matrix,
}

#[derive(Clone, Debug)]
pub struct WriterTaps {
    /// At `W_O`: concatenated head outputs and `∂L/∂F_attn`.
    pub attn: WriterTap,
    /// At `W_2`: SwiGLU hidden and `∂L/∂F_ffn`.
    pub ffn: WriterTap,
}

#[derive(Clone, Debug)]
pub struct BlockBackward {
    pub dx: Matrix,
    pub grads: BlockParams,
    pub taps: WriterTaps,
    /// Adjoint arriving at the attention sublayer's post-norm output.
    pub d_mid: Matrix,
}

fn uses_fused(kind: MergeKind, config: &ModelConfig) -> bool {
    kind == MergeKind::Mvsplit && config.fused_merge
}

fn merge_forward(x: &Matrix, f: Matrix, gates: &Gates, kind: MergeKind, config: &ModelConfig) -> Result<SublayerTape> {
    let layout = config.layout();
    if uses_fused(kind, config) {
        gates.check(kind)?;
        let Gates::Split { alpha, beta } = gates else {
            unreachable!("checked above")
        };
        let (out, cache) = fused_merge_forward(x, &f, alpha.data(), beta.data(), &layout, RMS_EPS)?;
        Ok(SublayerTape {
            kind,
            branch: f,
            merge: MergeTape::Fused(cache),
            out,
        })
    } else {
        let m = residual_merge(x, &f, gates, kind, &layout)?;
        Ok(SublayerTape {
            kind,
            branch: f,
            merge: MergeTape::Composed {
                z: m.z,
                inv_rms: m.inv_rms,
            },
            out: m.x_next,
        })
    }
}

fn merge_backward(
    x: &Matrix,
    tape: &SublayerTape,
    gates: &Gates,
    config: &ModelConfig,
    upstream: &Matrix,
) -> Result<MergeGrads> {
    match &tape.merge {
        MergeTape::Composed { z, inv_rms } => {
            let g = rmsnorm_rows_backward(z, inv_rms, upstream);
            pre_norm_merge_backward(x, &tape.branch, gates, tape.kind, &config.layout(), &g)
        }
        MergeTape::Fused(cache) => {
            let fg = fused_merge_backward(cache, upstream)?;
            Ok(MergeGrads {
                dx: fg.dx,
                df: fg.df,
                gates: Gates::Split {
                    alpha: Matrix::row_vector(&fg.d_alpha),
                    beta: Matrix::row_vector(&fg.d_beta),
                },
            })
        }
    }
}

impl SublayerTape {
    /// Pre-norm merge state, recomputed when the fused path did not keep it.
    pub fn pre_norm(&self, x: &Matrix, gates: &Gates, config: &ModelConfig) -> Result<Matrix> {
        match &self.merge {
            MergeTape::Composed { z, .. } => Ok(z.clone()),
            MergeTape::Fused(_) => pre_norm_merge(x, &self.branch, gates, self.kind, &config.layout()),
        }
    }
}

pub fn block_forward(
    x: &Matrix,
    params: &BlockParams,
    config: &ModelConfig,
    rope: &Rope,
) -> Result<(Matrix, BlockTape)> {
    let (attn_kind, ffn_kind) = config.residual_mode.merges();
    let (fa, attn) = attention_forward(x, params, config, rope)?;
    let attn_merge = merge_forward(x, fa, &params.attn_gates, attn_kind, config)?;
    let (ff, ffn) = ffn_forward(&attn_merge.out, params);
    if !ff.is_finite() {
        return Err(Error::NonFinite("ffn_forward".into()));
    }
    let ffn_merge = merge_forward(&attn_merge.out, ff, &params.ffn_gates, ffn_kind, config)?;
    let out = ffn_merge.out.clone();
    Ok((
        out,
        BlockTape {
            x: x.clone(),
            attn,
            attn_merge,
            ffn,
            ffn_merge,
        },
    ))
}

pub fn block_backward(
    tape: &BlockTape,
    params: &BlockParams,
    config: &ModelConfig,
    rope: &Rope,
    upstream: &Matrix,
) -> Result<BlockBackward> {
    if upstream.shape() != tape.output().shape() {
        return Err(Error::LayoutMismatch {
            expected: tape.output().rows(),
            actual: upstream.rows(),
        });
    }
    let fm = merge_backward(tape.mid(), &tape.ffn_merge, &params.ffn_gates, config, upstream)?;
    let (dx_ffn, ffn_grads) = ffn_backward(&tape.ffn, params, &fm.df);
    let d_mid = fm.dx.add(&dx_ffn);

    let am = merge_backward(&tape.x, &tape.attn_merge, &params.attn_gates, config, &d_mid)?;
    let (dx_attn, attn_grads) = attention_backward(&tape.attn, params, config, rope, &am.df)?;
    let dx = am.dx.add(&dx_attn);

    let grads = BlockParams {
        w_q: attn_grads.w_q,
        w_k: attn_grads.w_k,
        w_v: attn_grads.w_v,
        w_o: attn_grads.w_o,
        w_13: ffn_grads.w_13,
        w_2: ffn_grads.w_2,
        attn_gates: am.gates,
        ffn_gates: fm.gates,
    };
    let taps = WriterTaps {
        attn: WriterTap {
            y: tape.attn.h.clone(),
            delta: am.df,
        },
        ffn: WriterTap {
            y: tape.ffn.h.clone(),
            delta: fm.df,
        },
    };
    Ok(BlockBackward { dx, grads, taps, d_mid })
}
