//! Full runs: the training loop plus every artifact it leaves on disk.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::presets::Preset;
use super::{StepReport, Trainer};
use crate::diagnostics::{snapshot_json_line, DiagnosticsSnapshot, SnapshotCsv, RATIO_EPS};
use crate::error::Result;
use crate::model::save_checkpoint;

pub const LOSS_SCHEMA: &str = "mvlab.loss.v1";
pub const SUMMARY_SCHEMA: &str = "mvlab.summary.v1";

/// Deep-layer TCS above which a snapshot counts toward the collapse signature.
pub const COLLAPSE_TCS: f64 = 0.9;
/// Median deep-layer `G_mean/G_ctr` above which a snapshot counts toward the
/// collapse signature.
pub const COLLAPSE_GMD_RATIO: f64 = 10.0;

pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const LOSS_FILE: &str = "loss.csv";
pub const SNAPSHOT_CSV_FILE: &str = "snapshots.csv";
pub const SNAPSHOT_JSONL_FILE: &str = "snapshots.jsonl";
pub const TRACE_FILE: &str = "traces.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub traced: bool,
}

impl From<&StepReport> for LossRow {
    fn from(r: &StepReport) -> Self {
        Self {
            step: r.step,
            loss: r.loss,
            lr: r.lr,
            grad_norm: r.grad_norm,
            clip_scale: r.clip_scale,
            traced: r.trace.is_some(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

/// Flags a run whose loss stays above `factor ×` its value at `ref_step` for
/// `patience` consecutive steps, or turns non-finite.
#[derive(Clone, Debug)]
pub struct DivergenceDetector {
    ref_step: usize,
    factor: f64,
    patience: usize,
    reference: Option<f64>,
    streak: usize,
}

impl DivergenceDetector {
    pub fn new(ref_step: usize, factor: f64, patience: usize) -> Self {
        Self {
            ref_step,
            factor,
            patience,
            reference: None,
            streak: 0,
        }
    }

    pub fn observe(&mut self, step: usize, loss: f64) -> Option<Divergence> {
        if !loss.is_finite() {
            return Some(Divergence {
                step,
                reason: "non-finite loss".into(),
            });
        }
        if step == self.ref_step {
            self.reference = Some(loss);
        }
        let reference = self.reference?;
        if step > self.ref_step && loss > self.factor * reference {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        (self.streak >= self.patience.max(1)).then(|| Divergence {
            step,
            reason: format!(
                "loss above {}x its step-{} value for {} steps",
                self.factor, self.ref_step, self.patience
            ),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotDigest {
    pub step: usize,
    /// Mean TCS over the deepest quarter of layers.
    pub deep_tcs: f64,
    /// Median `G_mean/G_ctr` over both writers of the deepest quarter.
    pub deep_gmd_ratio: f64,
    pub max_tcs: f64,
}

/// First layer index of the deepest quarter.
pub fn deep_start(depth: usize) -> usize {
    depth - (depth / 4).max(1)
}

pub fn digest(snapshot: &DiagnosticsSnapshot) -> SnapshotDigest {
    let start = deep_start(snapshot.layers.len());
    let deep = &snapshot.layers[start..];
    let deep_tcs = deep.iter().map(|l| l.tcs).sum::<f64>() / deep.len() as f64;
    let mut ratios: Vec<f64> = deep
        .iter()
        .flat_map(|l| {
            [
                l.g_mean_wo / (l.g_ctr_wo + RATIO_EPS),
                l.g_mean_w2 / (l.g_ctr_w2 + RATIO_EPS),
            ]
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len();
    let median = if n % 2 == 1 {
        ratios[n / 2]
    } else {
        0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
    };
    SnapshotDigest {
        step: snapshot.step,
        deep_tcs,
        deep_gmd_ratio: median,
        max_tcs: snapshot.layers.iter().map(|l| l.tcs).fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub label: String,
    pub seed: u64,
    pub steps_requested: usize,
    pub steps_completed: usize,
    pub final_loss: f64,
    pub min_loss: f64,
    /// Mean loss over the first and last tenth of the run.
    pub loss_first_window: f64,
    pub loss_last_window: f64,
    /// Least-squares slope of the loss over the second half of the run.
    pub loss_slope_late: f64,
    pub divergence: Option<Divergence>,
    pub halted: bool,
    pub traces: usize,
    pub dataset_hash: String,
    pub snapshots: Vec<SnapshotDigest>,
    /// First snapshot showing both deep-layer TCS and writer-gradient
    /// coherence above their collapse thresholds.
    pub collapse_step: Option<usize>,
    /// Largest per-layer TCS seen in any snapshot.
    pub max_tcs: f64,
    pub final_tcs_profile: Vec<f64>,
    pub nonconverged_power_iterations: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn slope(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let xm = (n - 1.0) / 2.0;
    let ym = mean(v);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in v.iter().enumerate() {
        let dx = i as f64 - xm;
        num += dx * (y - ym);
        den += dx * dx;
    }
    num / den
}

struct Sinks {
    loss: csv::Writer<BufWriter<File>>,
    snap_csv: SnapshotCsv<BufWriter<File>>,
    snap_jsonl: BufWriter<File>,
    traces: BufWriter<File>,
}

impl Sinks {
    fn open(dir: &Path) -> Result<Self> {
        let mut loss_file = BufWriter::new(File::create(dir.join(LOSS_FILE))?);
        writeln!(loss_file, "#schema={LOSS_SCHEMA}")?;
        Ok(Self {
            loss: csv::Writer::from_writer(loss_file),
            snap_csv: SnapshotCsv::new(BufWriter::new(File::create(dir.join(SNAPSHOT_CSV_FILE))?))?,
            snap_jsonl: BufWriter::new(File::create(dir.join(SNAPSHOT_JSONL_FILE))?),
            traces: BufWriter::new(File::create(dir.join(TRACE_FILE))?),
        })
    }

    fn record(&mut self, report: &StepReport) -> Result<()> {
        self.loss.serialize(LossRow::from(report))?;
        if let Some(s) = &report.snapshot {
            self.snap_csv.write(s)?;
            writeln!(self.snap_jsonl, "{}", snapshot_json_line(s)?)?;
        }
        if let Some(t) = &report.trace {
            writeln!(self.traces, "{}", serde_json::to_string(t)?)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.loss.flush()?;
        self.snap_jsonl.flush()?;
        self.traces.flush()?;
        Ok(())
    }
}

/// Trains one configuration and writes its artifacts into `out_dir`.
/// The configuration is validated before anything touches the disk.
pub fn run_experiment(
    config: &TrainConfig,
    out_dir: &Path,
    label: &str,
    progress: &mut dyn FnMut(&StepReport),
) -> Result<RunSummary> {
    let mut trainer = Trainer::new(config.clone())?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), config.to_toml()?)?;
    let mut sinks = Sinks::open(out_dir)?;
    let mut detector = DivergenceDetector::new(
        config.divergence_ref_step,
        config.divergence_factor,
        config.divergence_patience,
    );
    let mut losses = Vec::with_capacity(config.steps);
    let mut digests = Vec::new();
    let mut divergence = None;
    let mut halted = false;
    let mut traces = 0;
    let mut nonconverged = 0;
    let mut final_profile = Vec::new();
    for step in 0..config.steps {
        let report = trainer.step(step + 1 == config.steps)?;
        sinks.record(&report)?;
        progress(&report);
        losses.push(report.loss);
        traces += usize::from(report.trace.is_some());
        if let Some(s) = &report.snapshot {
            digests.push(digest(s));
            nonconverged += s.nonconverged;
            final_profile = s.tcs_profile();
        }
        if divergence.is_none() {
            divergence = detector.observe(step, report.loss);
        }
        if !report.applied && config.halt_on_nonfinite {
            halted = true;
            break;
        }
    }
    sinks.finish()?;
    save_checkpoint(
        &out_dir.join(CHECKPOINT_FILE),
        &trainer.model.config,
        &trainer.model.params,
    )?;
    let n = losses.len();
    let window = (n / 10).max(1).min(n);
    let summary = RunSummary {
        schema: SUMMARY_SCHEMA.into(),
        label: label.into(),
        seed: config.seed,
        steps_requested: config.steps,
        steps_completed: n,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        min_loss: losses.iter().copied().fold(f64::INFINITY, f64::min),
        loss_first_window: mean(&losses[..window]),
        loss_last_window: mean(&losses[n - window..]),
        loss_slope_late: slope(&losses[n / 2..]),
        divergence,
        halted,
        traces,
        dataset_hash: trainer.dataset().hash(),
        collapse_step: digests
            .iter()
            .find(|d| d.deep_tcs > COLLAPSE_TCS && d.deep_gmd_ratio > COLLAPSE_GMD_RATIO)
            .map(|d| d.step),
        max_tcs: digests.iter().map(|d| d.max_tcs).fold(f64::NEG_INFINITY, f64::max),
        snapshots: digests,
        final_tcs_profile: final_profile,
        nonconverged_power_iterations: nonconverged,
    };
    fs::write(out_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Every run of a preset, each in its own subdirectory when the preset has
/// several.
pub fn run_preset(
    preset: Preset,
    base: &TrainConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(&str, &StepReport),
) -> Result<Vec<(String, RunSummary)>> {
    let runs = preset.runs(base);
    for (_, c) in &runs {
        c.validate()?;
    }
    let mut out = Vec::with_capacity(runs.len());
    for (sub, config) in runs {
        let dir = if sub.is_empty() {
            out_dir.to_path_buf()
        } else {
            out_dir.join(&sub)
        };
        let label = if sub.is_empty() {
            preset.name().to_string()
        } else {
            format!("{}/{sub}", preset.name())
        };
        let summary = run_experiment(&config, &dir, &label, &mut |r| progress(&label, r))?;
        out.push((sub, summary));
    }
    Ok(out)
}

/// Reads a `loss.csv` written by a run.
pub fn read_loss_csv(text: &str) -> Result<Vec<LossRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    Ok(reader.deserialize().collect::<std::result::Result<Vec<LossRow>, _>>()?)
}
