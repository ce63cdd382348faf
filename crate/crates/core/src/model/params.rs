use serde::{Deserialize, Serialize};

use super::config::{InitMode, MergeKind, ModelConfig, Precision};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Matrix, Rng};

/// Std of writer and final-projection weights under standard init.
pub const WRITER_INIT_STD: f64 = 0.02;

/// Residual gates of one sublayer merge. Gates are stored as `1×D`
/// (or `1×1`) matrices so they flow through the same optimizer code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Gates {
    None,
    Scalar { lambda: Matrix },
    Channel { lambda: Matrix },
    Split { alpha: Matrix, beta: Matrix },
}

impl Gates {
    pub fn init(kind: MergeKind, config: &ModelConfig) -> Self {
        let d = config.d_model;
        match kind {
            MergeKind::Baseline | MergeKind::HardCentering => Gates::None,
            MergeKind::Rezero => Gates::Scalar {
                lambda: Matrix::filled(1, 1, config.lambda_init),
            },
            MergeKind::Layerscale => Gates::Channel {
                lambda: Matrix::filled(1, d, config.lambda_init),
            },
            MergeKind::Mvsplit => Gates::Split {
                alpha: Matrix::filled(1, d, config.alpha_init),
                beta: Matrix::filled(1, d, config.beta_init),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        match self {
            Gates::None => Gates::None,
            Gates::Scalar { lambda } => Gates::Scalar { lambda: z(lambda) },
            Gates::Channel { lambda } => Gates::Channel { lambda: z(lambda) },
            Gates::Split { alpha, beta } => Gates::Split {
                alpha: z(alpha),
                beta: z(beta),
            },
        }
    }

    pub fn check(&self, kind: MergeKind) -> Result<()> {
        let ok = matches!(
            (kind, self),
            (MergeKind::Baseline | MergeKind::HardCentering, Gates::None)
                | (MergeKind::Rezero, Gates::Scalar { .. })
                | (MergeKind::Layerscale, Gates::Channel { .. })
                | (MergeKind::Mvsplit, Gates::Split { .. })
        );
        if ok {
            Ok(())
        } else {
            Err(Error::GateMismatch(format!("{kind:?} merge with {}", self.describe())))
        }
    }

    fn describe(&self) -> &'static str {
        match self {
            Gates::None => "no gates",
            Gates::Scalar { .. } => "scalar gate",
            Gates::Channel { .. } => "per-channel gate",
            Gates::Split { .. } => "split gates",
        }
    }

    fn named(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            Gates::None => vec![],
            Gates::Scalar { lambda } | Gates::Channel { lambda } => vec![("lambda", lambda)],
            Gates::Split { alpha, beta } => vec![("alpha", alpha), ("beta", beta)],
        }
    }

    fn named_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Gates::None => vec![],
            Gates::Scalar { lambda } | Gates::Channel { lambda } => vec![lambda],
            Gates::Split { alpha, beta } => vec![alpha, beta],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// Attention output projection (residual writer).
    pub w_o: Matrix,
    /// Fused SwiGLU input, `D × 2F`: gate columns first, value columns second.
    pub w_13: Matrix,
    /// FFN output projection (residual writer).
    pub w_2: Matrix,
    pub attn_gates: Gates,
    pub ffn_gates: Gates,
}

impl BlockParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.d_model;
        let f = config.ffn_dim;
        let fan_in = 1.0 / (d as f64).sqrt();
        let writer = |rng: &mut Rng, rows, cols| match config.init_mode {
            InitMode::ZeroWriter => Matrix::zeros(rows, cols),
            InitMode::Standard => rng.normal_matrix(rows, cols, WRITER_INIT_STD),
        };
        let w_q = rng.normal_matrix(d, d, fan_in);
        let w_k = rng.normal_matrix(d, d, fan_in);
        let w_v = rng.normal_matrix(d, d, fan_in);
        let w_o = writer(rng, d, d);
        let w_13 = rng.normal_matrix(d, 2 * f, fan_in);
        let w_2 = writer(rng, f, d);
        let (attn_kind, ffn_kind) = config.residual_mode.merges();
        Self {
            w_q,
            w_k,
            w_v,
            w_o,
            w_13,
            w_2,
            attn_gates: Gates::init(attn_kind, config),
            ffn_gates: Gates::init(ffn_kind, config),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            w_q: z(&self.w_q),
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            w_o: z(&self.w_o),
            w_13: z(&self.w_13),
            w_2: z(&self.w_2),
            attn_gates: self.attn_gates.zeros_like(),
            ffn_gates: self.ffn_gates.zeros_like(),
        }
    }
}

/// Parameter family used for grouped gradient norms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Embed,
    #[serde(rename = "Attn_QKV")]
    AttnQkv,
    #[serde(rename = "Attn_WO")]
    AttnWo,
    #[serde(rename = "FFN_W13")]
    FfnW13,
    #[serde(rename = "FFN_W2")]
    FfnW2,
    Gates,
    Final,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::Embed => "Embed",
            Family::AttnQkv => "Attn_QKV",
            Family::AttnWo => "Attn_WO",
            Family::FfnW13 => "FFN_W13",
            Family::FfnW2 => "FFN_W2",
            Family::Gates => "gates",
            Family::Final => "Final",
        }
    }

    /// Whether AdamW weight decay applies (2D weight matrices only).
    pub fn decays(self) -> bool {
        !matches!(self, Family::Gates)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamInfo {
    pub name: String,
    pub layer: Option<usize>,
    pub family: Family,
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Patch embedding, `C × D`.
    pub w_in: Matrix,
    pub blocks: Vec<BlockParams>,
    /// Final projection of image tokens back to latent channels, `D × C`.
    pub w_out: Matrix,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let c = config.channels;
        let d = config.d_model;
        let w_in = rng.normal_matrix(c, d, 1.0 / (c as f64).sqrt());
        let blocks = (0..config.depth).map(|_| BlockParams::init(config, &mut rng)).collect();
        let w_out = rng.normal_matrix(d, c, WRITER_INIT_STD);
        let mut params = Self { w_in, blocks, w_out };
        if config.precision == Precision::F32 {
            params.round_to_f32();
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_in: Matrix::zeros(self.w_in.rows(), self.w_in.cols()),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            w_out: Matrix::zeros(self.w_out.rows(), self.w_out.cols()),
        }
    }

    /// Every tensor with its name, layer and family, in a fixed order.
    pub fn tensors(&self) -> Vec<(ParamInfo, &Matrix)> {
        let info = |name: String, layer, family| ParamInfo { name, layer, family };
        let mut out = vec![(info("w_in".into(), None, Family::Embed), &self.w_in)];
        for (l, b) in self.blocks.iter().enumerate() {
            let at = Some(l);
            out.push((info(format!("blocks.{l}.w_q"), at, Family::AttnQkv), &b.w_q));
            out.push((info(format!("blocks.{l}.w_k"), at, Family::AttnQkv), &b.w_k));
            out.push((info(format!("blocks.{l}.w_v"), at, Family::AttnQkv), &b.w_v));
            out.push((info(format!("blocks.{l}.w_o"), at, Family::AttnWo), &b.w_o));
            out.push((info(format!("blocks.{l}.w_13"), at, Family::FfnW13), &b.w_13));
            out.push((info(format!("blocks.{l}.w_2"), at, Family::FfnW2), &b.w_2));
            for (n, m) in b.attn_gates.named() {
                out.push((info(format!("blocks.{l}.attn.{n}"), at, Family::Gates), m));
            }
            for (n, m) in b.ffn_gates.named() {
                out.push((info(format!("blocks.{l}.ffn.{n}"), at, Family::Gates), m));
            }
        }
        out.push((info("w_out".into(), None, Family::Final), &self.w_out));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.w_in];
        for b in &mut self.blocks {
            out.push(&mut b.w_q);
            out.push(&mut b.w_k);
            out.push(&mut b.w_v);
            out.push(&mut b.w_o);
            out.push(&mut b.w_13);
            out.push(&mut b.w_2);
            out.extend(b.attn_gates.named_mut());
            out.extend(b.ffn_gates.named_mut());
        }
        out.push(&mut self.w_out);
        out
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        let src: Vec<&Matrix> = other.tensors().into_iter().map(|(_, m)| m).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.add_assign(s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.tensors_mut() {
            m.scale_in_place(s);
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.frobenius_sq()).sum()
    }

    pub fn global_norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn count_nonfinite(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.count_nonfinite()).sum()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for m in self.tensors_mut() {
            m.round_to_f32();
        }
    }

    /// Overwrites all values from a flat slice in tensor order.
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(dim_err(
                "assign_flat",
                format!("{} values for {} parameters", values.len(), self.num_values()),
            ));
        }
        let mut offset = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Flattened copy of all values in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, m)| m.data().iter().copied())
            .collect()
    }
}
