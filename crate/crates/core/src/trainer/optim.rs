//! Loss, global-norm clipping and AdamW.

use crate::error::{dim_err, Error, Result};
use crate::model::ModelParams;
use crate::numerics::Matrix;

/// Mean squared error and its adjoint `2(v − target)/N`, where `N` is
/// `normalizer` (the element count of the whole batch when sharded).
pub fn rectified_flow_loss(v: &Matrix, target: &Matrix, normalizer: usize) -> Result<(f64, Matrix)> {
    if v.shape() != target.shape() {
        return Err(dim_err(
            "rectified_flow_loss",
            format!("prediction {:?} vs target {:?}", v.shape(), target.shape()),
        ));
    }
    let n = normalizer as f64;
    let diff = v.sub(target);
    let loss = diff.frobenius_sq() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// Rescales `grads` by `s = min(1, τ/‖G‖)` and returns `s`.
pub fn clip_global_norm(grads: &mut ModelParams, threshold: f64) -> Result<f64> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    let s = if norm > threshold { threshold / norm } else { 1.0 };
    if s != 1.0 {
        grads.scale(s);
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Bias-corrected AdamW with decoupled decay on decaying families only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: ModelParams,
    v: ModelParams,
    steps: u32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ModelParams) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        let decays: Vec<bool> = params.tensors().iter().map(|(i, _)| i.family.decays()).collect();
        let grads: Vec<&Matrix> = grads.tensors().into_iter().map(|(_, g)| g).collect();
        if grads.len() != decays.len() {
            return Err(dim_err("adamw_step", "gradient/parameter tensor count"));
        }
        self.steps += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((p, g), m), v), decay) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs).zip(decays) {
            if p.shape() != g.shape() {
                return Err(dim_err("adamw_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            let shrink = if decay { 1.0 - lr * weight_decay } else { 1.0 };
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi = *pi * shrink - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
