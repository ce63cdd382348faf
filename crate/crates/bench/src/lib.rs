//! Fixtures shared by the benchmarks.

use mvlab_core::model::{InitMode, ModelConfig, ResidualMode};
use mvlab_core::{Matrix, Rng, SegmentLayout};

/// Residual state, branch output, upstream adjoint and gates for one merge.
pub struct MergeCase {
    pub layout: SegmentLayout,
    pub x: Matrix,
    pub f: Matrix,
    pub up: Matrix,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn merge_case(image: usize, text: usize, width: usize, seed: u64) -> MergeCase {
    let mut rng = Rng::new(seed);
    let t = image + text;
    let x = rng.normal_matrix(t, width, 1.0);
    let f = rng.normal_matrix(t, width, 1.0);
    let up = rng.normal_matrix(t, width, 1.0);
    let alpha = (0..width).map(|_| rng.uniform_range(0.0, 1.0)).collect();
    let beta = (0..width).map(|_| rng.uniform_range(0.5, 1.5)).collect();
    MergeCase {
        layout: SegmentLayout::new(image, text),
        x,
        f,
        up,
        alpha,
        beta,
    }
}

/// The desk-default block shape with the given residual mode.
pub fn desk_block(mode: ResidualMode, fused: bool) -> ModelConfig {
    ModelConfig {
        depth: 1,
        residual_mode: mode,
        init_mode: InitMode::Standard,
        fused_merge: fused,
        ..ModelConfig::default()
    }
}
