use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{depth_scaled_beta, TrainConfig};
use crate::error::Error;
use crate::model::{InitMode, ResidualMode};

/// LayerScale initial gains swept by [`Preset::LayerscaleSweep`].
pub const LAYERSCALE_SWEEP: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Baseline,
    BaselineHalfLr,
    LayerscaleSweep,
    Rezero,
    Mvsplit,
    MvsplitAttnOnly,
    HardCentering,
    StandardInitFront,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Baseline,
        Preset::BaselineHalfLr,
        Preset::LayerscaleSweep,
        Preset::Rezero,
        Preset::Mvsplit,
        Preset::MvsplitAttnOnly,
        Preset::HardCentering,
        Preset::StandardInitFront,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::BaselineHalfLr => "baseline_half_lr",
            Preset::LayerscaleSweep => "layerscale_sweep",
            Preset::Rezero => "rezero",
            Preset::Mvsplit => "mvsplit",
            Preset::MvsplitAttnOnly => "mvsplit_attn_only",
            Preset::HardCentering => "hard_centering",
            Preset::StandardInitFront => "standard_init_front",
        }
    }

    /// The run(s) of this preset as `(subdirectory, config)`; the
    /// subdirectory is empty for single-run presets. Architecture size,
    /// steps and seed come from `base`.
    pub fn runs(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |mode: ResidualMode, init: InitMode| {
            let mut c = base.clone();
            c.model.residual_mode = mode;
            c.model.init_mode = init;
            c
        };
        match self {
            Preset::Baseline => vec![(String::new(), with(ResidualMode::Baseline, InitMode::ZeroWriter))],
            Preset::BaselineHalfLr => {
                let mut c = with(ResidualMode::Baseline, InitMode::ZeroWriter);
                c.lr_target *= 0.5;
                vec![(String::new(), c)]
            }
            Preset::LayerscaleSweep => LAYERSCALE_SWEEP
                .iter()
                .map(|&lambda| {
                    let mut c = with(ResidualMode::Layerscale, InitMode::Standard);
                    c.model.lambda_init = lambda;
                    (format!("lambda_{lambda:e}"), c)
                })
                .collect(),
            Preset::Rezero => {
                // Zero writers would leave both the gate and the writer without
                // gradient, so writers start open and the gate closed.
                let mut c = with(ResidualMode::Rezero, InitMode::Standard);
                c.model.lambda_init = 0.0;
                vec![(String::new(), c)]
            }
            Preset::Mvsplit => {
                let mut c = with(ResidualMode::Mvsplit, InitMode::ZeroWriter);
                c.model.alpha_init = 0.0;
                if c.depth_scaled_beta {
                    c.model.beta_init = depth_scaled_beta(c.model.depth);
                }
                vec![(String::new(), c)]
            }
            Preset::MvsplitAttnOnly => {
                let mut c = with(ResidualMode::MvsplitAttnOnly, InitMode::ZeroWriter);
                c.model.alpha_init = 0.0;
                if c.depth_scaled_beta {
                    c.model.beta_init = depth_scaled_beta(c.model.depth);
                }
                vec![(String::new(), c)]
            }
            Preset::HardCentering => {
                vec![(String::new(), with(ResidualMode::HardCentering, InitMode::ZeroWriter))]
            }
            Preset::StandardInitFront => {
                vec![(String::new(), with(ResidualMode::Baseline, InitMode::Standard))]
            }
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!(matches!("nope".parse::<Preset>(), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn preset_settings() {
        let base = TrainConfig::default();
        let (_, mv) = &Preset::Mvsplit.runs(&base)[0];
        assert_eq!((mv.model.alpha_init, mv.model.beta_init), (0.0, 1.0));
        assert_eq!(mv.model.init_mode, InitMode::ZeroWriter);
        let sweep = Preset::LayerscaleSweep.runs(&base);
        let lambdas: Vec<f64> = sweep.iter().map(|(_, c)| c.model.lambda_init).collect();
        assert_eq!(lambdas, LAYERSCALE_SWEEP.to_vec());
        let dirs: std::collections::HashSet<_> = sweep.iter().map(|(d, _)| d.clone()).collect();
        assert_eq!(dirs.len(), 4);
        let scaled = TrainConfig {
            depth_scaled_beta: true,
            model: crate::model::ModelConfig {
                depth: 32,
                ..base.model.clone()
            },
            ..base.clone()
        };
        let (_, mv) = &Preset::Mvsplit.runs(&scaled)[0];
        assert!((mv.model.beta_init - 0.1767766952966369).abs() < 1e-15);
        let (_, half) = &Preset::BaselineHalfLr.runs(&base)[0];
        assert_eq!(half.lr_target, base.lr_target / 2.0);
        let (_, front) = &Preset::StandardInitFront.runs(&base)[0];
        assert_eq!(front.model.init_mode, InitMode::Standard);
        assert_eq!(front.model.residual_mode, ResidualMode::Baseline);
    }
}
