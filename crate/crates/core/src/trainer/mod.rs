//! Rectified-flow training on synthetic latents with sharded gradient
//! accumulation, clipping, AdamW, periodic diagnostics and gradient traces.

mod config;
mod data;
mod optim;
mod presets;
mod run;
mod step;

pub use config::{depth_scaled_beta, mup_base_lr, TrainConfig};
pub use data::{make_batch, RectifiedFlowBatch, Sample, SyntheticDataset};
pub use optim::{clip_global_norm, rectified_flow_loss, AdamW, AdamWConfig};
pub use presets::{Preset, LAYERSCALE_SWEEP};
pub use run::{
    deep_start, digest, read_loss_csv, run_experiment, run_preset, Divergence, DivergenceDetector, LossRow, RunSummary,
    SnapshotDigest, CHECKPOINT_FILE, COLLAPSE_GMD_RATIO, COLLAPSE_TCS, CONFIG_FILE, LOSS_FILE, LOSS_SCHEMA,
    SNAPSHOT_CSV_FILE, SNAPSHOT_JSONL_FILE, SUMMARY_FILE, SUMMARY_SCHEMA, TRACE_FILE,
};
pub use step::{
    compute_gradients, grouped_norms, trace_pipeline, writer_modes, GradientPass, GroupedNorm, ShardStats, StepState,
    TraceEvent, TraceMonitor, TraceReason, Writer, WriterModes,
};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{collect_snapshot, DiagnosticsSnapshot};
use crate::error::{Error, Result};
use crate::model::{Model, Precision};
use crate::numerics::Rng;

const DATA_STREAM: u64 = 10;
const SNAPSHOT_SEED_SALT: u64 = 0x5eed_d1a6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub shards: Vec<ShardStats>,
    pub trace: Option<TraceEvent>,
    pub snapshot: Option<DiagnosticsSnapshot>,
    /// False when a non-finite loss or gradient skipped the update.
    pub applied: bool,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    optimizer: AdamW,
    dataset: SyntheticDataset,
    data_rng: Rng,
    monitor: TraceMonitor,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(
            AdamWConfig {
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.adam_eps,
                weight_decay: config.weight_decay,
            },
            &model.params,
        );
        let dataset = SyntheticDataset::new(config.seed, config.classes, &config.model)?;
        let monitor = TraceMonitor::new(config.trace_factor, config.trace_ema_decay, config.trace_warmup);
        Ok(Self {
            data_rng: Rng::new(config.seed).substream(DATA_STREAM),
            config,
            model,
            optimizer,
            dataset,
            monitor,
            step: 0,
        })
    }

    pub fn dataset(&self) -> &SyntheticDataset {
        &self.dataset
    }

    /// Index of the next step.
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn monitor(&self) -> &TraceMonitor {
        &self.monitor
    }

    pub fn next_batch(&mut self) -> RectifiedFlowBatch {
        make_batch(&self.dataset, self.config.batch, None, &mut self.data_rng)
    }

    fn snapshot_due(&self, force: bool) -> bool {
        force || (self.config.snapshot_every > 0 && self.step.is_multiple_of(self.config.snapshot_every))
    }

    /// One optimization step on `batch`.
    pub fn train_step(&mut self, batch: &RectifiedFlowBatch, force_snapshot: bool) -> Result<StepReport> {
        let step = self.step;
        let threshold = self.monitor.threshold();
        let pass = match compute_gradients(&self.model, batch, self.config.shards, self.config.diag_samples) {
            Ok(pass) => pass,
            Err(Error::NonFinite(_)) => return Ok(self.skip_nonfinite(step, threshold, f64::NAN, Vec::new(), None)),
            Err(e) => return Err(e),
        };
        let mut grads = pass.grads;
        let grad_norm = grads.global_norm();
        let trace = trace_pipeline(
            &StepState {
                step,
                grads: &grads,
                params: &self.model.params,
                shards: &pass.shards,
                writer_mean: &pass.writer_mean,
                clip_norm: self.config.clip_norm,
            },
            threshold,
            self.config.trace_top_k,
        );
        if !grad_norm.is_finite() {
            return Ok(self.skip_nonfinite(step, threshold, pass.loss, pass.shards, trace));
        }
        let snapshot = if self.snapshot_due(force_snapshot) || trace.is_some() {
            let mut rng = Rng::new(self.config.seed ^ SNAPSHOT_SEED_SALT).substream(step as u64);
            Some(collect_snapshot(
                step,
                &self.model,
                &pass.kept_tapes,
                &pass.kept_backs,
                &grads,
                &mut rng,
            )?)
        } else {
            None
        };
        let clip_scale = clip_global_norm(&mut grads, self.config.clip_norm)?;
        let lr = self.config.lr_at(step);
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        if self.config.model.precision == Precision::F32 {
            self.model.params.round_to_f32();
        }
        self.monitor.observe(grad_norm);
        self.step += 1;
        Ok(StepReport {
            step,
            loss: pass.loss,
            lr,
            grad_norm,
            clip_scale,
            shards: pass.shards,
            trace,
            snapshot,
            applied: true,
        })
    }

    fn skip_nonfinite(
        &mut self,
        step: usize,
        threshold: f64,
        loss: f64,
        shards: Vec<ShardStats>,
        trace: Option<TraceEvent>,
    ) -> StepReport {
        let trace = trace.unwrap_or_else(|| TraceEvent {
            step,
            reason: TraceReason::NonFinite,
            global_norm: f64::NAN,
            threshold,
            post_clip_norm: f64::NAN,
            top_k: Vec::new(),
            top_k_mass: 0.0,
            grouped_sum_sq: f64::NAN,
            shards: shards.clone(),
            nonfinite_params: self.model.params.count_nonfinite(),
            writer_modes: Vec::new(),
        });
        self.step += 1;
        StepReport {
            step,
            loss,
            lr: self.config.lr_at(step),
            grad_norm: f64::NAN,
            clip_scale: f64::NAN,
            shards,
            trace: Some(trace),
            snapshot: None,
            applied: false,
        }
    }

    pub fn step(&mut self, force_snapshot: bool) -> Result<StepReport> {
        let batch = self.next_batch();
        self.train_step(&batch, force_snapshot)
    }
}
