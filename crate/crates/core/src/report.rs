//! Plot-ready artifacts derived from a run or audit directory.
//!
//! Nothing here renders figures: every panel maps to a CSV with a
//! `#schema=` line and a header row, plus a JSON summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audit::{read_audit_csv, AUDIT_SCHEMA};
use crate::diagnostics::{read_snapshot_csv, LayerRecord, RATIO_EPS, SNAPSHOT_SCHEMA};
use crate::error::{Error, Result};
use crate::trainer::{
    read_loss_csv, RunSummary, Writer, LOSS_FILE, LOSS_SCHEMA, SNAPSHOT_CSV_FILE, SUMMARY_FILE, SUMMARY_SCHEMA,
};

pub const REPORT_SCHEMA: &str = "mvlab.report.v1";
/// Subdirectory the report is written into.
pub const REPORT_DIR: &str = "report";
pub const REPORT_FILE: &str = "report.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const HEATMAP_FILE: &str = "depth_heatmap.csv";
pub const GMD_CURVE_FILE: &str = "gmd_curves.csv";
pub const AUDIT_SCATTER_FILE: &str = "audit_scatter.csv";
/// Name of the audit table inside an audit directory.
pub const AUDIT_FILE: &str = "audit.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditDigest {
    pub points: usize,
    /// Largest `|(𝒜−1) − (T−1)κ̂| / (T−1)κ̂` over points with a nonzero envelope.
    pub max_envelope_gap: f64,
    pub max_abs_excess: f64,
    /// Points with `|𝒜−1|` above their envelope by more than rounding.
    pub bound_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub run: Option<RunSummary>,
    pub audit: Option<AuditDigest>,
    /// Conditions a reader should know before trusting the curves.
    pub flags: Vec<String>,
    pub files: Vec<String>,
}

/// Quantile with linear interpolation between order statistics.
/// `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn read_checked(path: &Path, schema: &str) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::Incomplete(format!("{}: {e}", path.display())))?;
    let first = text.lines().next().unwrap_or("");
    let expected = format!("#schema={schema}");
    if first != expected {
        return Err(Error::Incomplete(format!(
            "{}: expected `{expected}`, found `{first}`",
            path.display()
        )));
    }
    Ok(text)
}

fn csv_text(schema: &str, header: &str, rows: &[String]) -> String {
    let mut s = format!("#schema={schema}\n{header}\n");
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

fn loss_curve(text: &str) -> Result<String> {
    let rows: Vec<String> = read_loss_csv(text)?
        .iter()
        .map(|r| {
            format!(
                "{},{:e},{:e},{:e},{:e}",
                r.step, r.loss, r.lr, r.grad_norm, r.clip_scale
            )
        })
        .collect();
    Ok(csv_text(
        "mvlab.report.loss.v1",
        "step,loss,lr,grad_norm,clip_scale",
        &rows,
    ))
}

fn heatmap(records: &[LayerRecord]) -> String {
    let rows: Vec<String> = records
        .iter()
        .map(|r| format!("{},{},{:e},{:e},{:e}", r.step, r.layer, r.rho_t, r.tcs, r.mu_eff))
        .collect();
    csv_text("mvlab.report.heatmap.v1", "step,layer,rho_T,TCS,mu_eff", &rows)
}

/// Across-depth median and interquartile range of each writer's gradient
/// modes, one row per snapshot step and writer.
fn gmd_curves(records: &[LayerRecord]) -> String {
    let mut steps: Vec<usize> = records.iter().map(|r| r.step).collect();
    steps.dedup();
    let mut rows = Vec::new();
    for step in steps {
        let layers: Vec<&LayerRecord> = records.iter().filter(|r| r.step == step).collect();
        let writers: [(Writer, fn(&LayerRecord) -> (f64, f64)); 2] = [
            (Writer::AttnOut, |r| (r.g_mean_wo, r.g_ctr_wo)),
            (Writer::FfnOut, |r| (r.g_mean_w2, r.g_ctr_w2)),
        ];
        for (writer, modes) in writers {
            let stats = |f: &dyn Fn((f64, f64)) -> f64| {
                let mut v: Vec<f64> = layers.iter().map(|r| f(modes(r))).collect();
                v.sort_by(f64::total_cmp);
                [quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75)]
            };
            let ratio = stats(&|(m, c)| m / (c + RATIO_EPS));
            let mean = stats(&|(m, _)| m);
            let ctr = stats(&|(_, c)| c);
            let name = match writer {
                Writer::AttnOut => "W_O",
                Writer::FfnOut => "W_2",
            };
            let mut line = format!("{step},{name}");
            for v in ratio.iter().chain(&mean).chain(&ctr) {
                let _ = write!(line, ",{v:e}");
            }
            rows.push(line);
        }
    }
    csv_text(
        "mvlab.report.gmd.v1",
        "step,writer,ratio_q1,ratio_median,ratio_q3,g_mean_q1,g_mean_median,g_mean_q3,g_ctr_q1,g_ctr_median,g_ctr_q3",
        &rows,
    )
}

fn audit_scatter(text: &str) -> Result<(String, AuditDigest)> {
    let points = read_audit_csv(text)?;
    let mut digest = AuditDigest {
        points: points.len(),
        max_envelope_gap: 0.0,
        max_abs_excess: 0.0,
        bound_violations: 0,
    };
    let rows: Vec<String> = points
        .iter()
        .map(|p| {
            let gap = if p.envelope > 0.0 {
                (p.excess_amplification - p.envelope).abs() / p.envelope
            } else {
                0.0
            };
            digest.max_envelope_gap = digest.max_envelope_gap.max(gap);
            digest.max_abs_excess = digest.max_abs_excess.max(p.excess_amplification.abs());
            if p.excess_amplification.abs() > p.envelope + 1e-9 * p.envelope.max(1.0) {
                digest.bound_violations += 1;
            }
            let writer = match p.writer {
                Writer::AttnOut => "W_O",
                Writer::FfnOut => "W_2",
            };
            format!(
                "{},{},{writer},{:e},{:e},{:e}",
                p.sample, p.layer, p.excess_amplification, p.envelope, gap
            )
        })
        .collect();
    let csv = csv_text(
        "mvlab.report.audit.v1",
        "sample,layer,writer,excess_amplification,envelope,envelope_gap",
        &rows,
    );
    Ok((csv, digest))
}

/// Builds the report for `dir` and writes it into `dir/report/`.
///
/// A run directory needs `summary.json`; its absence means the run did not
/// finish and is an error. An audit directory needs `audit.csv`.
pub fn build_report(dir: &Path) -> Result<(Report, PathBuf)> {
    let summary_path = dir.join(SUMMARY_FILE);
    let audit_path = dir.join(AUDIT_FILE);
    let is_run = summary_path.exists() || dir.join(LOSS_FILE).exists();
    if !is_run && !audit_path.exists() {
        return Err(Error::Incomplete(format!(
            "{} holds neither run nor audit artifacts",
            dir.display()
        )));
    }
    let mut outputs: Vec<(&str, String)> = Vec::new();
    let mut flags = Vec::new();
    let mut run = None;
    if is_run {
        let text = fs::read_to_string(&summary_path)
            .map_err(|_| Error::Incomplete(format!("{} is missing; the run did not finish", summary_path.display())))?;
        let summary: RunSummary = serde_json::from_str(&text)?;
        if summary.schema != SUMMARY_SCHEMA {
            return Err(Error::Incomplete(format!(
                "unknown summary schema `{}`",
                summary.schema
            )));
        }
        if summary.halted {
            flags.push(format!(
                "halted on a non-finite step after {} steps",
                summary.steps_completed
            ));
        } else if summary.steps_completed < summary.steps_requested {
            flags.push(format!(
                "completed {} of {} steps",
                summary.steps_completed, summary.steps_requested
            ));
        }
        if let Some(d) = &summary.divergence {
            flags.push(format!("diverged at step {}: {}", d.step, d.reason));
        }
        if summary.nonconverged_power_iterations > 0 {
            flags.push(format!(
                "{} power iterations hit the iteration cap",
                summary.nonconverged_power_iterations
            ));
        }
        let loss = read_checked(&dir.join(LOSS_FILE), LOSS_SCHEMA)?;
        outputs.push((LOSS_CURVE_FILE, loss_curve(&loss)?));
        let snaps = read_checked(&dir.join(SNAPSHOT_CSV_FILE), SNAPSHOT_SCHEMA)?;
        let records = read_snapshot_csv(&snaps)?;
        outputs.push((HEATMAP_FILE, heatmap(&records)));
        outputs.push((GMD_CURVE_FILE, gmd_curves(&records)));
        run = Some(summary);
    }
    let mut audit = None;
    if audit_path.exists() {
        let text = read_checked(&audit_path, AUDIT_SCHEMA)?;
        let (csv, digest) = audit_scatter(&text)?;
        if digest.bound_violations > 0 {
            flags.push(format!("{} audit points exceed the envelope", digest.bound_violations));
        }
        outputs.push((AUDIT_SCATTER_FILE, csv));
        audit = Some(digest);
    }
    let report = Report {
        schema: REPORT_SCHEMA.into(),
        run,
        audit,
        flags,
        files: outputs.iter().map(|(name, _)| name.to_string()).collect(),
    };
    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out)?;
    for (name, body) in &outputs {
        fs::write(out.join(name), body)?;
    }
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok((report, out))
}
