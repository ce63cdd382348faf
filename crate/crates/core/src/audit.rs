//! Per-layer alignment audit of the residual writers on a chosen batch:
//! scatter points `(𝒜−1, (T−1)κ̂)` plus the writer-gradient mode split.
//!
//! Image tokens only by default; [`TokenScope::All`] adds the text tokens.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelInput, WriterTap};
use crate::numerics::{norm, Matrix, Rng};
use crate::subspace::{alignment_audit, gmd_decompose};
use crate::trainer::{make_batch, rectified_flow_loss, SyntheticDataset, Writer};

pub const AUDIT_SCHEMA: &str = "mvlab.audit.v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditBatch {
    /// Ordinary rectified-flow samples.
    Natural,
    /// Every embedded token row of a sample equals the same vector and every
    /// target row is the same, so writer inputs coincide across tokens.
    Homogenized,
    /// Natural taps with the writer inputs replaced by an orthogonal set of
    /// equal per-token norms.
    Orthogonalized,
}

/// Which token rows enter the audit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScope {
    #[default]
    Image,
    All,
}

impl AuditBatch {
    pub fn name(self) -> &'static str {
        match self {
            AuditBatch::Natural => "natural",
            AuditBatch::Homogenized => "homogenized",
            AuditBatch::Orthogonalized => "orthogonalized",
        }
    }
}

impl FromStr for AuditBatch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [AuditBatch::Natural, AuditBatch::Homogenized, AuditBatch::Orthogonalized]
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown audit batch `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditPoint {
    pub sample: usize,
    pub layer: usize,
    pub writer: Writer,
    /// `𝒜 − 1`.
    pub excess_amplification: f64,
    /// `(T−1)κ̂`.
    pub envelope: f64,
    pub kappa: f64,
    pub kappa_hat: f64,
    pub tokens: usize,
    pub dropped: usize,
    pub g_mean: f64,
    pub g_ctr: f64,
}

/// Replaces the rows of `y` by an orthogonal set carrying the original row
/// norms. Needs at least as many columns as rows.
pub fn orthogonalize_rows(y: &Matrix) -> Result<Matrix> {
    if y.rows() > y.cols() {
        return Err(Error::Config(format!(
            "cannot orthogonalize {} tokens in {} dimensions",
            y.rows(),
            y.cols()
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(y.rows());
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        // Gram-Schmidt on the row, falling back to unit vectors when the row
        // is (numerically) spanned by earlier ones.
        let mut candidates = std::iter::once(y.row(r).to_vec())
            .chain((0..y.cols()).map(|c| (0..y.cols()).map(|k| f64::from(u8::from(k == c))).collect()));
        let v = loop {
            let Some(mut v) = candidates.next() else {
                return Err(Error::Singular("orthogonalize_rows".into()));
            };
            for _ in 0..2 {
                for b in &basis {
                    let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
            }
            let n = norm(&v);
            if n > 1e-8 {
                v.iter_mut().for_each(|x| *x /= n);
                break v;
            }
        };
        let scale = norm(y.row(r));
        out.row_mut(r).iter_mut().zip(&v).for_each(|(o, b)| *o = scale * b);
        basis.push(v);
    }
    Ok(out)
}

fn points_for(
    sample: usize,
    layer: usize,
    writer: Writer,
    tap: &WriterTap,
    rows: usize,
    orthogonal: bool,
) -> Result<AuditPoint> {
    let mut y = tap.y.row_block(0, rows);
    if orthogonal {
        y = orthogonalize_rows(&y)?;
    }
    let delta = tap.delta.row_block(0, rows);
    let audit = alignment_audit(&y, &delta)?;
    let modes = gmd_decompose(&y, &delta)?;
    Ok(AuditPoint {
        sample,
        layer,
        writer,
        excess_amplification: audit.amplification_a - 1.0,
        envelope: audit.envelope(),
        kappa: audit.kappa,
        kappa_hat: audit.kappa_hat,
        tokens: audit.tokens,
        dropped: audit.dropped,
        g_mean: modes.g_mean,
        g_ctr: modes.g_ctr,
    })
}

/// Audits `samples` draws of the chosen batch kind through `model`, over the
/// image tokens.
pub fn audit_model(
    model: &Model,
    dataset: &SyntheticDataset,
    kind: AuditBatch,
    samples: usize,
    seed: u64,
) -> Result<Vec<AuditPoint>> {
    audit_model_scoped(model, dataset, kind, samples, seed, TokenScope::Image)
}

pub fn audit_model_scoped(
    model: &Model,
    dataset: &SyntheticDataset,
    kind: AuditBatch,
    samples: usize,
    seed: u64,
    scope: TokenScope,
) -> Result<Vec<AuditPoint>> {
    let layout = model.config.layout();
    let img = layout.image_count;
    let rows = match scope {
        TokenScope::Image => img,
        TokenScope::All => layout.total(),
    };
    let mut rng = Rng::new(seed).substream(20);
    let batch = make_batch(dataset, samples, None, &mut rng);
    let normalizer = img * model.config.channels;
    let mut out = Vec::new();
    for i in 0..samples {
        let (x0, target) = match kind {
            AuditBatch::Homogenized => {
                let latents = &batch.z_t[i];
                let row = latents.col_mean();
                let flat = Matrix::from_fn(img, latents.cols(), |_, c| row[c]);
                let embedded = model.embed(&ModelInput {
                    latents: flat,
                    text: batch.text[i].clone(),
                })?;
                let e = embedded.row(0).to_vec();
                let x0 = Matrix::from_fn(layout.total(), e.len(), |_, c| e[c]);
                let t = batch.target[i].col_mean();
                (x0, Matrix::from_fn(img, t.len(), |_, c| t[c]))
            }
            _ => (model.embed(&batch.input(i))?, batch.target[i].clone()),
        };
        let blocks = model.forward_embedded(&x0)?;
        let hidden = blocks.last().map(|b| b.output()).unwrap_or(&x0);
        let v = hidden.row_block(0, img).mul(&model.params.w_out);
        let (_, d_v) = rectified_flow_loss(&v, &target, normalizer)?;
        let d_img = d_v.mul_t(&model.params.w_out);
        let mut d_hidden = Matrix::zeros(layout.total(), model.config.d_model);
        for r in 0..img {
            d_hidden.row_mut(r).copy_from_slice(d_img.row(r));
        }
        let (_, taps, _) = model.backward_hidden(&blocks, &d_hidden)?;
        let orthogonal = kind == AuditBatch::Orthogonalized;
        for (l, t) in taps.iter().enumerate() {
            out.push(points_for(i, l, Writer::AttnOut, &t.attn, rows, orthogonal)?);
            out.push(points_for(i, l, Writer::FfnOut, &t.ffn, rows, orthogonal)?);
        }
    }
    Ok(out)
}

/// Writes scatter-ready rows behind a `#schema=` line.
pub fn write_audit_csv<W: Write>(mut sink: W, points: &[AuditPoint]) -> Result<()> {
    writeln!(sink, "#schema={AUDIT_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(sink);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_audit_csv(text: &str) -> Result<Vec<AuditPoint>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    Ok(reader
        .deserialize()
        .collect::<std::result::Result<Vec<AuditPoint>, _>>()?)
}
