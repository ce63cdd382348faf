use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::SegmentLayout;

/// How a sublayer's branch output is merged into the residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `z = x + f`
    Baseline,
    /// `z = x + λ·f` with a scalar gate.
    Rezero,
    /// `z = x + λ⊙f` with a per-channel gate.
    Layerscale,
    /// `z = x + β⊙(P f) + α⊙J(f − x)` on both sublayers.
    Mvsplit,
    /// MV-Split on the attention merge, baseline on the FFN merge.
    MvsplitAttnOnly,
    /// `z = P(x + f)` (negative control).
    HardCentering,
}

impl ResidualMode {
    pub const ALL: [ResidualMode; 6] = [
        ResidualMode::Baseline,
        ResidualMode::Rezero,
        ResidualMode::Layerscale,
        ResidualMode::Mvsplit,
        ResidualMode::MvsplitAttnOnly,
        ResidualMode::HardCentering,
    ];

    /// Merge rule of the attention and FFN sublayers.
    pub fn merges(self) -> (MergeKind, MergeKind) {
        match self {
            ResidualMode::Baseline => (MergeKind::Baseline, MergeKind::Baseline),
            ResidualMode::Rezero => (MergeKind::Rezero, MergeKind::Rezero),
            ResidualMode::Layerscale => (MergeKind::Layerscale, MergeKind::Layerscale),
            ResidualMode::Mvsplit => (MergeKind::Mvsplit, MergeKind::Mvsplit),
            ResidualMode::MvsplitAttnOnly => (MergeKind::Mvsplit, MergeKind::Baseline),
            ResidualMode::HardCentering => (MergeKind::HardCentering, MergeKind::HardCentering),
        }
    }
}

/// Merge rule of a single sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    Baseline,
    Rezero,
    Layerscale,
    Mvsplit,
    HardCentering,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `W_O = W_2 = 0`, everything else standard.
    ZeroWriter,
    /// Writers and final projection `N(0, 0.02²)`, others fan-in scaled.
    Standard,
}

/// Storage precision of parameters. Arithmetic is always `f64`; `F32`
/// rounds every stored parameter through `f32` after init and each update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub text_tokens: usize,
    /// Latent channels per image token.
    pub channels: usize,
    pub residual_mode: ResidualMode,
    pub init_mode: InitMode,
    pub alpha_init: f64,
    pub beta_init: f64,
    pub lambda_init: f64,
    pub rope_theta: f64,
    pub precision: Precision,
    /// Use the two-pass closed-form backward for MV-Split merges.
    pub fused_merge: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 16,
            d_model: 64,
            ffn_dim: 192,
            heads: 4,
            head_dim: 16,
            grid_h: 8,
            grid_w: 8,
            text_tokens: 8,
            channels: 4,
            residual_mode: ResidualMode::Mvsplit,
            init_mode: InitMode::ZeroWriter,
            alpha_init: 0.0,
            beta_init: 1.0,
            lambda_init: 1e-2,
            rope_theta: 10000.0,
            precision: Precision::F64,
            fused_merge: true,
        }
    }
}

impl ModelConfig {
    pub fn layout(&self) -> SegmentLayout {
        SegmentLayout::new(self.grid_h * self.grid_w, self.text_tokens)
    }

    pub fn tokens(&self) -> usize {
        self.layout().total()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("depth must be ≥ 1".into());
        }
        if self.heads * self.head_dim != self.d_model {
            return bad(format!(
                "d_model {} ≠ heads {} × head_dim {}",
                self.d_model, self.heads, self.head_dim
            ));
        }
        if !self.head_dim.is_multiple_of(4) {
            return bad(format!("head_dim {} must be divisible by 4", self.head_dim));
        }
        if self.ffn_dim == 0 || self.channels == 0 {
            return bad("ffn_dim and channels must be positive".into());
        }
        if self.grid_h * self.grid_w == 0 {
            return bad("image grid must be non-empty".into());
        }
        if self.tokens() < 2 {
            return bad("sequence needs at least two tokens".into());
        }
        if !(self.rope_theta > 1.0) {
            return bad(format!("rope_theta {} must exceed 1", self.rope_theta));
        }
        Ok(())
    }
}
