//! Sharded gradient computation and the step-level gradient trace.

use serde::{Deserialize, Serialize};

use super::data::RectifiedFlowBatch;
use super::optim::rectified_flow_loss;
use crate::error::{Error, Result};
use crate::model::{Family, Model, ModelBackward, ModelParams, ModelTape, WriterTap};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardStats {
    pub shard: usize,
    pub samples: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    /// Largest per-sample norm of the output adjoint `∂L/∂v`.
    pub max_output_grad_norm: f64,
}

/// Result of one forward/backward sweep over a batch.
#[derive(Clone, Debug)]
pub struct GradientPass {
    /// Mean loss over the batch.
    pub loss: f64,
    pub sample_losses: Vec<f64>,
    /// Gradient of the batch-mean loss, reduced shard by shard in order.
    pub grads: ModelParams,
    pub shards: Vec<ShardStats>,
    /// Per layer, `[W_O, W_2]` mean-coherent writer components summed over
    /// samples, in weight orientation (`input × output`).
    pub writer_mean: Vec<[Matrix; 2]>,
    /// Tapes and backward results of the first samples, kept for diagnostics.
    pub kept_tapes: Vec<ModelTape>,
    pub kept_backs: Vec<ModelBackward>,
}

/// `T·ȳ δ̄ᵀ` in weight orientation.
fn mean_component(tap: &WriterTap) -> Matrix {
    let t = tap.y.rows() as f64;
    let y = tap.y.col_mean();
    let d = tap.delta.col_mean();
    Matrix::from_fn(y.len(), d.len(), |i, j| t * y[i] * d[j])
}

/// Forward and backward of every sample, accumulated per shard then across
/// shards in a fixed order. Samples are assigned to shards contiguously.
pub fn compute_gradients(
    model: &Model,
    batch: &RectifiedFlowBatch,
    shards: usize,
    keep: usize,
) -> Result<GradientPass> {
    let b = batch.len();
    if shards == 0 || b == 0 || !b.is_multiple_of(shards) {
        return Err(Error::Config(format!("{shards} shards cannot split a batch of {b}")));
    }
    let per = b / shards;
    let img = model.config.layout().image_count;
    let normalizer = b * img * model.config.channels;
    let mut total: Option<ModelParams> = None;
    let mut writer_mean: Vec<[Matrix; 2]> = Vec::new();
    let mut sample_losses = Vec::with_capacity(b);
    let mut stats = Vec::with_capacity(shards);
    let mut kept_tapes = Vec::new();
    let mut kept_backs = Vec::new();
    for r in 0..shards {
        let mut shard_grad: Option<ModelParams> = None;
        let mut losses = Vec::with_capacity(per);
        let mut m_out: f64 = 0.0;
        for i in r * per..(r + 1) * per {
            let (v, tape) = model.forward(&batch.input(i))?;
            let (_, adj) = rectified_flow_loss(&v, &batch.target[i], normalizer)?;
            let loss = v.sub(&batch.target[i]).frobenius_sq() / (img * model.config.channels) as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss of sample {i}")));
            }
            losses.push(loss);
            m_out = m_out.max(adj.frobenius_norm());
            let back = model.backward(&tape, &adj)?;
            if writer_mean.is_empty() {
                writer_mean = back
                    .taps
                    .iter()
                    .map(|t| [mean_component(&t.attn), mean_component(&t.ffn)])
                    .collect();
            } else {
                for (acc, t) in writer_mean.iter_mut().zip(&back.taps) {
                    acc[0].add_assign(&mean_component(&t.attn));
                    acc[1].add_assign(&mean_component(&t.ffn));
                }
            }
            match &mut shard_grad {
                Some(g) => g.add_assign(&back.grads),
                None => shard_grad = Some(back.grads.clone()),
            }
            if kept_tapes.len() < keep {
                kept_tapes.push(tape);
                kept_backs.push(back);
            }
        }
        let mean = losses.iter().sum::<f64>() / per as f64;
        let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / per as f64;
        stats.push(ShardStats {
            shard: r,
            samples: per,
            loss_mean: mean,
            loss_std: var.sqrt(),
            max_output_grad_norm: m_out,
        });
        sample_losses.extend(losses);
        let shard_grad = shard_grad.expect("non-empty shard");
        match &mut total {
            Some(t) => t.add_assign(&shard_grad),
            None => total = Some(shard_grad),
        }
    }
    Ok(GradientPass {
        loss: sample_losses.iter().sum::<f64>() / b as f64,
        sample_losses,
        grads: total.expect("non-empty batch"),
        shards: stats,
        writer_mean,
        kept_tapes,
        kept_backs,
    })
}

/// `G_{l,τ}`: the norm of one parameter family at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedNorm {
    pub layer: Option<usize>,
    pub family: Family,
    pub norm: f64,
}

/// Grouped norms over every (layer, family) group, in parameter order.
pub fn grouped_norms(grads: &ModelParams) -> Vec<GroupedNorm> {
    let mut out: Vec<GroupedNorm> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    for (info, m) in grads.tensors() {
        match out
            .iter()
            .position(|g| g.layer == info.layer && g.family == info.family)
        {
            Some(i) => sums[i] += m.frobenius_sq(),
            None => {
                out.push(GroupedNorm {
                    layer: info.layer,
                    family: info.family,
                    norm: 0.0,
                });
                sums.push(m.frobenius_sq());
            }
        }
    }
    for (g, s) in out.iter_mut().zip(sums) {
        g.norm = s.sqrt();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Writer {
    #[serde(rename = "W_O")]
    AttnOut,
    #[serde(rename = "W_2")]
    FfnOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriterModes {
    pub layer: usize,
    pub writer: Writer,
    pub g_mean: f64,
    pub g_ctr: f64,
}

/// Batch GMD at every writer: the centered part is the accumulated writer
/// gradient minus the summed mean-coherent parts.
pub fn writer_modes(grads: &ModelParams, writer_mean: &[[Matrix; 2]]) -> Vec<WriterModes> {
    let mut out = Vec::with_capacity(2 * writer_mean.len());
    for (l, (block, mean)) in grads.blocks.iter().zip(writer_mean).enumerate() {
        for (writer, grad, mu) in [
            (Writer::AttnOut, &block.w_o, &mean[0]),
            (Writer::FfnOut, &block.w_2, &mean[1]),
        ] {
            out.push(WriterModes {
                layer: l,
                writer,
                g_mean: mu.frobenius_norm(),
                g_ctr: grad.sub(mu).frobenius_norm(),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceReason {
    Threshold,
    NonFinite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: usize,
    pub reason: TraceReason,
    pub global_norm: f64,
    pub threshold: f64,
    pub post_clip_norm: f64,
    pub top_k: Vec<GroupedNorm>,
    /// Share of the squared norm held by the top-K groups.
    pub top_k_mass: f64,
    /// `Σ G²_{l,τ}` over all groups; equals `global_norm²`.
    pub grouped_sum_sq: f64,
    pub shards: Vec<ShardStats>,
    pub nonfinite_params: usize,
    pub writer_modes: Vec<WriterModes>,
}

/// What the trace inspects at one step, before clipping.
pub struct StepState<'a> {
    pub step: usize,
    pub grads: &'a ModelParams,
    pub params: &'a ModelParams,
    pub shards: &'a [ShardStats],
    pub writer_mean: &'a [[Matrix; 2]],
    pub clip_norm: f64,
}

pub fn trace_pipeline(state: &StepState<'_>, threshold: f64, top_k: usize) -> Option<TraceEvent> {
    let norm = state.grads.global_norm();
    let reason = if !norm.is_finite() {
        TraceReason::NonFinite
    } else if norm > threshold {
        TraceReason::Threshold
    } else {
        return None;
    };
    let mut groups = grouped_norms(state.grads);
    let grouped_sum_sq: f64 = groups.iter().map(|g| g.norm * g.norm).sum();
    groups.sort_by(|a, b| b.norm.total_cmp(&a.norm));
    groups.truncate(top_k);
    let top_sq: f64 = groups.iter().map(|g| g.norm * g.norm).sum();
    let post_clip_norm = if norm > state.clip_norm { state.clip_norm } else { norm };
    Some(TraceEvent {
        step: state.step,
        reason,
        global_norm: norm,
        threshold,
        post_clip_norm,
        top_k: groups,
        top_k_mass: if grouped_sum_sq > 0.0 {
            top_sq / grouped_sum_sq
        } else {
            0.0
        },
        grouped_sum_sq,
        shards: state.shards.to_vec(),
        nonfinite_params: state.params.count_nonfinite(),
        writer_modes: writer_modes(state.grads, state.writer_mean),
    })
}

/// Running average of the global norm that arms the trace trigger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMonitor {
    pub factor: f64,
    pub decay: f64,
    pub warmup: usize,
    pub ema: Option<f64>,
    pub seen: usize,
}

impl TraceMonitor {
    pub fn new(factor: f64, decay: f64, warmup: usize) -> Self {
        Self {
            factor,
            decay,
            warmup,
            ema: None,
            seen: 0,
        }
    }

    /// Current trigger level; infinite until armed.
    pub fn threshold(&self) -> f64 {
        match self.ema {
            Some(e) if self.seen >= self.warmup => self.factor * e,
            _ => f64::INFINITY,
        }
    }

    pub fn observe(&mut self, norm: f64) {
        if !norm.is_finite() {
            return;
        }
        self.ema = Some(match self.ema {
            None => norm,
            Some(e) => self.decay * e + (1.0 - self.decay) * norm,
        });
        self.seen += 1;
    }
}
