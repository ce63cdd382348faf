//! Single-stream DiT stack with analytic backward.
//!
//! Image latents are embedded by `W_in`, concatenated with the text tokens,
//! run through `depth` Post-Norm blocks, and the image rows of the final
//! hidden state are projected back to latent channels by `W_out`.

mod attention;
mod block;
mod checkpoint;
mod config;
mod ffn;
mod merge;
mod params;
mod rope;

pub use attention::{attention_backward, attention_forward, AttnGrads, AttnTape};
pub use block::{
    block_backward, block_forward, BlockBackward, BlockTape, MergeTape, SublayerTape, WriterTap, WriterTaps,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{InitMode, MergeKind, ModelConfig, Precision, ResidualMode};
pub use ffn::{ffn_backward, ffn_forward, FfnGrads, FfnTape};
pub use merge::{
    pre_norm_merge, pre_norm_merge_backward, residual_merge, residual_merge_backward, MergeGrads, MergeOutput,
};
pub use params::{BlockParams, Family, Gates, ModelParams, ParamInfo, WRITER_INIT_STD};
pub use rope::{rope_2d_apply, Rope};

use crate::error::{dim_err, Error, Result};
use crate::numerics::Matrix;

/// One sample: `T_img × C` latents and `T_txt × D` text embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub latents: Matrix,
    pub text: Matrix,
}

#[derive(Clone, Debug)]
pub struct ModelTape {
    pub latents: Matrix,
    /// Embedded `[image; text]` sequence entering the first block.
    pub x0: Matrix,
    pub blocks: Vec<BlockTape>,
}

impl ModelTape {
    pub fn hidden(&self) -> &Matrix {
        self.blocks.last().map(|b| b.output()).unwrap_or(&self.x0)
    }
}

#[derive(Clone, Debug)]
pub struct ModelBackward {
    pub grads: ModelParams,
    /// Writer taps, one entry per block.
    pub taps: Vec<WriterTaps>,
    /// Adjoint of the embedded sequence.
    pub d_x0: Matrix,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    rope: Rope,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if params.blocks.len() != config.depth {
            return Err(Error::Config(format!(
                "{} blocks for depth {}",
                params.blocks.len(),
                config.depth
            )));
        }
        let (attn_kind, ffn_kind) = config.residual_mode.merges();
        for b in &params.blocks {
            b.attn_gates.check(attn_kind)?;
            b.ffn_gates.check(ffn_kind)?;
        }
        let rope = Rope::new((config.grid_h, config.grid_w), config.head_dim, config.rope_theta)?;
        Ok(Self { config, params, rope })
    }

    pub fn rope(&self) -> &Rope {
        &self.rope
    }

    pub fn embed(&self, input: &ModelInput) -> Result<Matrix> {
        let layout = self.config.layout();
        if input.latents.shape() != (layout.image_count, self.config.channels) {
            return Err(dim_err(
                "embed",
                format!(
                    "latents {:?}, expected ({}, {})",
                    input.latents.shape(),
                    layout.image_count,
                    self.config.channels
                ),
            ));
        }
        if input.text.shape() != (layout.text_count, self.config.d_model) {
            return Err(dim_err(
                "embed",
                format!(
                    "text {:?}, expected ({}, {})",
                    input.text.shape(),
                    layout.text_count,
                    self.config.d_model
                ),
            ));
        }
        Ok(Matrix::vstack(&input.latents.mul(&self.params.w_in), &input.text))
    }

    /// Runs the block stack on an already-embedded sequence.
    pub fn forward_embedded(&self, x0: &Matrix) -> Result<Vec<BlockTape>> {
        let mut x = x0.clone();
        let mut tapes = Vec::with_capacity(self.config.depth);
        for block in &self.params.blocks {
            let (next, tape) = block_forward(&x, block, &self.config, &self.rope)?;
            tapes.push(tape);
            x = next;
        }
        Ok(tapes)
    }

    /// Velocity prediction for the image tokens, `T_img × C`.
    pub fn forward(&self, input: &ModelInput) -> Result<(Matrix, ModelTape)> {
        let x0 = self.embed(input)?;
        let blocks = self.forward_embedded(&x0)?;
        let tape = ModelTape {
            latents: input.latents.clone(),
            x0,
            blocks,
        };
        let img = self.config.layout().image_count;
        let v = tape.hidden().row_block(0, img).mul(&self.params.w_out);
        if !v.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok((v, tape))
    }

    /// Backward through the block stack given the adjoint of the final hidden state.
    pub fn backward_hidden(
        &self,
        blocks: &[BlockTape],
        d_hidden: &Matrix,
    ) -> Result<(Vec<BlockParams>, Vec<WriterTaps>, Matrix)> {
        let mut grads = Vec::with_capacity(blocks.len());
        let mut taps = Vec::with_capacity(blocks.len());
        let mut d = d_hidden.clone();
        for (tape, params) in blocks.iter().zip(&self.params.blocks).rev() {
            let b = block_backward(tape, params, &self.config, &self.rope, &d)?;
            grads.push(b.grads);
            taps.push(b.taps);
            d = b.dx;
        }
        grads.reverse();
        taps.reverse();
        Ok((grads, taps, d))
    }

    /// Full backward for output adjoint `d_v = ∂L/∂v`.
    pub fn backward(&self, tape: &ModelTape, d_v: &Matrix) -> Result<ModelBackward> {
        let layout = self.config.layout();
        let img = layout.image_count;
        if d_v.shape() != (img, self.config.channels) {
            return Err(dim_err("backward", format!("output adjoint {:?}", d_v.shape())));
        }
        let hidden_img = tape.hidden().row_block(0, img);
        let w_out = hidden_img.t_mul(d_v);
        let mut d_hidden = Matrix::zeros(layout.total(), self.config.d_model);
        let d_img = d_v.mul_t(&self.params.w_out);
        for r in 0..img {
            d_hidden.row_mut(r).copy_from_slice(d_img.row(r));
        }
        let (blocks, taps, d_x0) = self.backward_hidden(&tape.blocks, &d_hidden)?;
        let w_in = tape.latents.t_mul(&d_x0.row_block(0, img));
        Ok(ModelBackward {
            grads: ModelParams { w_in, blocks, w_out },
            taps,
            d_x0,
        })
    }
}

#[cfg(test)]
mod tests;
