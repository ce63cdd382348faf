use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Optimization, data and instrumentation settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    /// Global batch, split evenly across `shards`.
    pub batch: usize,
    /// Virtual data-parallel shards.
    pub shards: usize,
    /// Width-independent learning rate; the applied base rate follows
    /// `target / (0.2·√D)`.
    pub lr_target: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay, 2D weight matrices only.
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// A step is traced when its pre-clip norm exceeds this multiple of the
    /// running average of earlier norms.
    pub trace_factor: f64,
    /// Smoothing of the norm average used by the trace trigger.
    pub trace_ema_decay: f64,
    /// Steps before the trigger is armed.
    pub trace_warmup: usize,
    pub trace_top_k: usize,
    /// Snapshot cadence in steps; 0 disables periodic snapshots.
    pub snapshot_every: usize,
    /// Samples of each batch the forward diagnostics are computed on.
    pub diag_samples: usize,
    pub classes: usize,
    pub seed: u64,
    /// MV-Split presets start the centered gain at `1/√L` instead of 1.
    pub depth_scaled_beta: bool,
    /// Stop at the first non-finite loss.
    pub halt_on_nonfinite: bool,
    /// Loss-series window of the divergence heuristic.
    pub divergence_ref_step: usize,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 2000,
            batch: 32,
            shards: 4,
            lr_target: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            trace_factor: 5.0,
            trace_ema_decay: 0.98,
            trace_warmup: 20,
            trace_top_k: 15,
            snapshot_every: 50,
            diag_samples: 4,
            classes: 8,
            seed: 0,
            depth_scaled_beta: false,
            halt_on_nonfinite: true,
            divergence_ref_step: 100,
            divergence_factor: 3.0,
            divergence_patience: 200,
        }
    }
}

impl TrainConfig {
    /// `target / (0.2·√D)`.
    pub fn base_lr(&self) -> f64 {
        mup_base_lr(self.lr_target, self.model.d_model)
    }

    /// Linear warmup to the base rate, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.base_lr();
        if self.warmup_steps == 0 {
            base
        } else {
            base * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.shards == 0 || !self.batch.is_multiple_of(self.shards) {
            return bad(format!("shards {} must divide batch {}", self.shards, self.batch));
        }
        if self.classes < 2 {
            return bad("classes must be ≥ 2".into());
        }
        if !(self.lr_target > 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr_target and clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("AdamW betas must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.trace_ema_decay) {
            return bad("trace_ema_decay must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }
}

/// μP width rule for the base learning rate.
pub fn mup_base_lr(target: f64, d_model: usize) -> f64 {
    target / (0.2 * (d_model as f64).sqrt())
}

/// `1/√L`, the depth-scaled centered gain.
pub fn depth_scaled_beta(depth: usize) -> f64 {
    1.0 / (depth as f64).sqrt()
}
