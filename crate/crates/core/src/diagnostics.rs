//! Forward, attention and writer-gradient diagnostics, plus per-layer snapshots.
//!
//! Every ratio uses `ε = 1e-12` in its denominator. Attention metrics use the
//! global projectors over the whole joint sequence; `μ(X) = JX`, `c(X) = PX`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{Model, ModelBackward, ModelParams, ModelTape, WriterTap};
use crate::numerics::{cosine, dot, Matrix, Rng};
use crate::subspace::{apply_mean, centered_global, gmd_decompose, mean_global, Projection};

pub const RATIO_EPS: f64 = 1e-12;
pub const POWER_ITERS: usize = 100;
pub const POWER_TOL: f64 = 1e-9;
/// Above this many tokens TCS switches from exact to sampled pairs.
pub const TCS_EXACT_MAX_TOKENS: usize = 64;
pub const TCS_SAMPLE_PAIRS: usize = 2048;

/// `‖μ(X)‖_F / (‖c(X)‖_F + ε)`.
pub fn energy_ratio(x: &Matrix, projection: Projection) -> Result<f64> {
    let mu = apply_mean(x, projection)?;
    let c = x.sub(&mu);
    Ok(mu.frobenius_norm() / (c.frobenius_norm() + RATIO_EPS))
}

/// `‖U‖_F / (‖X‖_F + ε)`.
pub fn tr_ratio(update: &Matrix, state: &Matrix) -> f64 {
    update.frobenius_norm() / (state.frobenius_norm() + RATIO_EPS)
}

/// `‖c(U)‖_F / (‖c(X)‖_F + ε)`.
pub fn var_gain(update: &Matrix, state: &Matrix) -> f64 {
    centered_global(update).frobenius_norm() / (centered_global(state).frobenius_norm() + RATIO_EPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn center_in_place(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

fn matvec(a: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|r| dot(a.row(r), v)).collect()
}

fn matvec_t(a: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.cols()];
    for (r, &s) in v.iter().enumerate() {
        if s != 0.0 {
            for (o, x) in out.iter_mut().zip(a.row(r)) {
                *o += s * x;
            }
        }
    }
    out
}

/// `‖PAP‖₂` by power iteration on `(PAP)ᵀ(PAP)` from a seeded start vector.
pub fn mu_eff(a: &Matrix, iters: usize, tol: f64, rng: &mut Rng) -> Result<SpectralEstimate> {
    if a.rows() != a.cols() || a.rows() == 0 {
        return Err(dim_err(
            "mu_eff",
            format!("attention must be square, got {:?}", a.shape()),
        ));
    }
    let t = a.rows();
    let mut v: Vec<f64> = (0..t).map(|_| rng.normal()).collect();
    center_in_place(&mut v);
    let mut prev = f64::NAN;
    let mut sigma = 0.0;
    for k in 1..=iters {
        let n = dot(&v, &v).sqrt();
        if n == 0.0 {
            return Ok(SpectralEstimate {
                value: 0.0,
                iterations: k,
                converged: true,
            });
        }
        v.iter_mut().for_each(|x| *x /= n);
        // v stays centered, so P v = v.
        let mut u = matvec(a, &v);
        center_in_place(&mut u);
        sigma = dot(&u, &u).sqrt();
        if (sigma - prev).abs() < tol {
            return Ok(SpectralEstimate {
                value: sigma,
                iterations: k,
                converged: true,
            });
        }
        prev = sigma;
        v = matvec_t(a, &u);
        center_in_place(&mut v);
    }
    Ok(SpectralEstimate {
        value: sigma,
        iterations: iters,
        converged: false,
    })
}

/// `‖A − JA‖_F / ‖A‖_F`.
pub fn row_div(a: &Matrix) -> f64 {
    let denom = a.frobenius_norm();
    if denom == 0.0 {
        return 0.0;
    }
    centered_global(a).frobenius_norm() / denom
}

/// Centered retention `Ret(c←c)` and mean leakage `Leakage(μ←c)` of one attention step.
pub fn retention_and_leakage(a: &Matrix, x: &Matrix) -> Result<(f64, f64)> {
    if a.cols() != x.rows() {
        return Err(dim_err(
            "retention_and_leakage",
            format!("attention {:?} vs state {:?}", a.shape(), x.shape()),
        ));
    }
    let cx = centered_global(x);
    let acx = a.mul(&cx);
    let mu = mean_global(&acx);
    let c = acx.sub(&mu);
    let denom = cx.frobenius_norm() + RATIO_EPS;
    Ok((c.frobenius_norm() / denom, mu.frobenius_norm() / denom))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcsEstimate {
    pub value: f64,
    /// Ordered pairs that entered the average.
    pub pairs: usize,
    pub sampled: bool,
    /// Zero-norm tokens left out.
    pub excluded: usize,
}

/// Mean pairwise cosine similarity over ordered pairs `i ≠ j`.
pub fn token_cosine_similarity(x: &Matrix, sample_pairs: usize, rng: &mut Rng) -> Result<TcsEstimate> {
    let live: Vec<usize> = (0..x.rows()).filter(|&r| x.row(r).iter().any(|v| *v != 0.0)).collect();
    let excluded = x.rows() - live.len();
    let n = live.len();
    if n < 2 {
        return Err(Error::TooFewTokens(format!(
            "token cosine similarity needs 2 nonzero tokens, found {n}"
        )));
    }
    let cos = |i: usize, j: usize| cosine(x.row(live[i]), x.row(live[j])).unwrap_or(0.0);
    if n <= TCS_EXACT_MAX_TOKENS {
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += cos(i, j);
            }
        }
        let pairs = n * (n - 1);
        Ok(TcsEstimate {
            value: 2.0 * sum / pairs as f64,
            pairs,
            sampled: false,
            excluded,
        })
    } else {
        let mut sum = 0.0;
        for _ in 0..sample_pairs {
            let i = rng.below(n);
            let mut j = rng.below(n - 1);
            if j >= i {
                j += 1;
            }
            sum += cos(i, j);
        }
        Ok(TcsEstimate {
            value: sum / sample_pairs as f64,
            pairs: sample_pairs,
            sampled: true,
            excluded,
        })
    }
}

/// Batch writer-gradient modes: per-sample decompositions summed over samples.
pub fn batch_writer_modes<'a>(taps: impl IntoIterator<Item = &'a WriterTap>) -> Result<(f64, f64)> {
    let mut mu: Option<Matrix> = None;
    let mut ctr: Option<Matrix> = None;
    for tap in taps {
        let r = gmd_decompose(&tap.y, &tap.delta)?;
        match (&mut mu, &mut ctr) {
            (Some(m), Some(c)) => {
                m.add_assign(&r.delta_w_mu);
                c.add_assign(&r.delta_w_c);
            }
            _ => {
                mu = Some(r.delta_w_mu);
                ctr = Some(r.delta_w_c);
            }
        }
    }
    match (mu, ctr) {
        (Some(m), Some(c)) => Ok((m.frobenius_norm(), c.frobenius_norm())),
        _ => Err(Error::Incomplete("no writer taps".into())),
    }
}

/// One layer of a snapshot. Field names follow the metric symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub step: usize,
    pub layer: usize,
    #[serde(rename = "rho_T")]
    pub rho_t: f64,
    #[serde(rename = "r_TR")]
    pub tr_ratio: f64,
    #[serde(rename = "VarGain")]
    pub var_gain: f64,
    pub mu_eff: f64,
    pub mu_eff_converged: bool,
    #[serde(rename = "RowDiv")]
    pub row_div: f64,
    #[serde(rename = "Ret_cc")]
    pub ret_cc: f64,
    #[serde(rename = "Leak_mc")]
    pub leak_mc: f64,
    #[serde(rename = "TCS")]
    pub tcs: f64,
    #[serde(rename = "G_mean_WO")]
    pub g_mean_wo: f64,
    #[serde(rename = "G_ctr_WO")]
    pub g_ctr_wo: f64,
    #[serde(rename = "G_mean_W2")]
    pub g_mean_w2: f64,
    #[serde(rename = "G_ctr_W2")]
    pub g_ctr_w2: f64,
    #[serde(rename = "G_Q")]
    pub q_grad_rms: f64,
    #[serde(rename = "G_K")]
    pub k_grad_rms: f64,
    /// Largest `‖c(AX)‖ − μ_eff·‖c(X)‖` over live attention matrices.
    pub contraction_excess: f64,
}

pub const SNAPSHOT_SCHEMA: &str = "mvlab.snapshot.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSnapshot {
    pub step: usize,
    /// Samples the forward metrics were averaged over.
    pub samples: usize,
    pub layers: Vec<LayerRecord>,
    /// Power iterations that hit the iteration cap.
    pub nonconverged: usize,
}

impl DiagnosticsSnapshot {
    /// Per-layer TCS.
    pub fn tcs_profile(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.tcs).collect()
    }
}

/// Effective update written into the stream by one block: the pre-norm
/// increments of both sublayers.
fn block_update(model: &Model, tape: &ModelTape, layer: usize) -> Result<Matrix> {
    let b = &tape.blocks[layer];
    let p = &model.params.blocks[layer];
    let za = b.attn_merge.pre_norm(&b.x, &p.attn_gates, &model.config)?;
    let zf = b.ffn_merge.pre_norm(b.mid(), &p.ffn_gates, &model.config)?;
    Ok(za.sub(&b.x).add(&zf.sub(b.mid())))
}

/// Builds one snapshot from forward tapes and backward results of the
/// diagnosed samples, and the full-batch gradient for the Q/K RMS.
pub fn collect_snapshot(
    step: usize,
    model: &Model,
    tapes: &[ModelTape],
    backs: &[ModelBackward],
    grads: &ModelParams,
    rng: &mut Rng,
) -> Result<DiagnosticsSnapshot> {
    if tapes.is_empty() || tapes.len() != backs.len() {
        return Err(Error::Incomplete(format!(
            "snapshot needs matching tapes and backward results, got {} and {}",
            tapes.len(),
            backs.len()
        )));
    }
    let depth = model.config.depth;
    let img = model.config.layout().image_count;
    let n = tapes.len() as f64;
    let mut nonconverged = 0;
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let mut rec = LayerRecord {
            step,
            layer: l,
            rho_t: 0.0,
            tr_ratio: 0.0,
            var_gain: 0.0,
            mu_eff: 0.0,
            mu_eff_converged: true,
            row_div: 0.0,
            ret_cc: 0.0,
            leak_mc: 0.0,
            tcs: 0.0,
            g_mean_wo: 0.0,
            g_ctr_wo: 0.0,
            g_mean_w2: 0.0,
            g_ctr_w2: 0.0,
            q_grad_rms: grads.blocks[l].w_q.rms(),
            k_grad_rms: grads.blocks[l].w_k.rms(),
            contraction_excess: f64::NEG_INFINITY,
        };
        for tape in tapes {
            let b = tape
                .blocks
                .get(l)
                .ok_or_else(|| Error::Incomplete(format!("no tape for layer {l}")))?;
            let out = b.output();
            rec.rho_t += energy_ratio(out, Projection::Global)? / n;
            let u = block_update(model, tape, l)?;
            rec.tr_ratio += tr_ratio(&u, &b.x) / n;
            rec.var_gain += var_gain(&u, &b.x) / n;
            rec.tcs += token_cosine_similarity(&out.row_block(0, img), TCS_SAMPLE_PAIRS, rng)
                .map(|t| t.value)
                .unwrap_or(0.0)
                / n;
            let heads = b.attn.attn.len() as f64;
            let cx_norm = centered_global(&b.x).frobenius_norm();
            for a in &b.attn.attn {
                let est = mu_eff(a, POWER_ITERS, POWER_TOL, rng)?;
                if !est.converged {
                    nonconverged += 1;
                    rec.mu_eff_converged = false;
                }
                rec.mu_eff += est.value / (n * heads);
                rec.row_div += row_div(a) / (n * heads);
                let (ret, leak) = retention_and_leakage(a, &b.x)?;
                rec.ret_cc += ret / (n * heads);
                rec.leak_mc += leak / (n * heads);
                let lhs = centered_global(&a.mul(&b.x)).frobenius_norm();
                rec.contraction_excess = rec.contraction_excess.max(lhs - est.value * cx_norm);
            }
        }
        let (gm, gc) = batch_writer_modes(backs.iter().map(|b| &b.taps[l].attn))?;
        rec.g_mean_wo = gm;
        rec.g_ctr_wo = gc;
        let (gm, gc) = batch_writer_modes(backs.iter().map(|b| &b.taps[l].ffn))?;
        rec.g_mean_w2 = gm;
        rec.g_ctr_w2 = gc;
        layers.push(rec);
    }
    Ok(DiagnosticsSnapshot {
        step,
        samples: tapes.len(),
        layers,
        nonconverged,
    })
}

/// CSV writer for snapshot rows; the first line is a `#schema=` comment.
pub struct SnapshotCsv<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> SnapshotCsv<W> {
    pub fn new(mut sink: W) -> Result<Self> {
        writeln!(sink, "#schema={SNAPSHOT_SCHEMA}")?;
        Ok(Self {
            inner: csv::Writer::from_writer(sink),
        })
    }

    pub fn write(&mut self, snapshot: &DiagnosticsSnapshot) -> Result<()> {
        for rec in &snapshot.layers {
            self.inner.serialize(rec)?;
        }
        self.inner.flush()?;
        Ok(())
    }
}

/// Reads rows written by [`SnapshotCsv`].
pub fn read_snapshot_csv(text: &str) -> Result<Vec<LayerRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    Ok(reader
        .deserialize()
        .collect::<std::result::Result<Vec<LayerRecord>, _>>()?)
}

pub fn snapshot_json_line(snapshot: &DiagnosticsSnapshot) -> Result<String> {
    Ok(serde_json::to_string(snapshot)?)
}
