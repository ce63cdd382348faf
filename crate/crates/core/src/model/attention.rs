//! Multi-head self-attention with 2D RoPE and QK-Norm over the joint
//! `[image; text]` sequence.
//!
//! Per head: RoPE is applied to image rows of Q and K, then each row is
//! RMS-normalized (no gain), logits are scaled by `head_dim^(-1/2)`, and the
//! row softmax mixes the values. Head outputs are concatenated into `H` and
//! projected by the writer `W_O`.

use super::config::ModelConfig;
use super::params::BlockParams;
use super::rope::Rope;
use crate::error::{Error, Result};
use crate::numerics::{rmsnorm_rows, rmsnorm_rows_backward, softmax_in_place, softmax_jvp, Matrix, RMS_EPS};

/// Forward intermediates of one attention sublayer.
#[derive(Clone, Debug)]
pub struct AttnTape {
    pub x: Matrix,
    /// RoPE-rotated queries/keys before QK-Norm, one `T×hd` block per head.
    pub q_rot: Vec<Matrix>,
    pub k_rot: Vec<Matrix>,
    pub q_inv: Vec<Vec<f64>>,
    pub k_inv: Vec<Vec<f64>>,
    pub q_hat: Vec<Matrix>,
    pub k_hat: Vec<Matrix>,
    /// Row-stochastic attention matrix per head.
    pub attn: Vec<Matrix>,
    pub v: Matrix,
    /// Concatenated head outputs, the input of `W_O`.
    pub h: Matrix,
}

/// Gradients of the attention sublayer's weights.
#[derive(Clone, Debug)]
pub struct AttnGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

fn finite_or(op: &str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

pub fn attention_forward(
    x: &Matrix,
    params: &BlockParams,
    config: &ModelConfig,
    rope: &Rope,
) -> Result<(Matrix, AttnTape)> {
    let layout = config.layout();
    layout.check(x.rows())?;
    let hd = config.head_dim;
    let heads = config.heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let q = rope.apply(&x.mul(&params.w_q), heads, &layout)?;
    let k = rope.apply(&x.mul(&params.w_k), heads, &layout)?;
    let v = x.mul(&params.w_v);

    let mut h = Matrix::zeros(x.rows(), config.d_model);
    let mut tape = AttnTape {
        x: x.clone(),
        q_rot: Vec::with_capacity(heads),
        k_rot: Vec::with_capacity(heads),
        q_inv: Vec::with_capacity(heads),
        k_inv: Vec::with_capacity(heads),
        q_hat: Vec::with_capacity(heads),
        k_hat: Vec::with_capacity(heads),
        attn: Vec::with_capacity(heads),
        v: Matrix::zeros(0, 0),
        h: Matrix::zeros(0, 0),
    };
    for head in 0..heads {
        let cols = head * hd..(head + 1) * hd;
        let qh = q.col_block(cols.start, cols.end);
        let kh = k.col_block(cols.start, cols.end);
        let vh = v.col_block(cols.start, cols.end);
        let (q_hat, q_inv) = rmsnorm_rows(&qh, RMS_EPS);
        let (k_hat, k_inv) = rmsnorm_rows(&kh, RMS_EPS);
        let mut a = q_hat.mul_t(&k_hat);
        a.scale_in_place(scale);
        for r in 0..a.rows() {
            softmax_in_place(a.row_mut(r));
        }
        h.set_col_block(cols.start, &a.mul(&vh));
        tape.q_rot.push(qh);
        tape.k_rot.push(kh);
        tape.q_inv.push(q_inv);
        tape.k_inv.push(k_inv);
        tape.q_hat.push(q_hat);
        tape.k_hat.push(k_hat);
        tape.attn.push(a);
    }
    let out = h.mul(&params.w_o);
    finite_or("attention_forward", &out)?;
    tape.v = v;
    tape.h = h;
    Ok((out, tape))
}

/// Returns `(dx, grads)` for upstream `d_out = ∂L/∂(H W_O)`.
pub fn attention_backward(
    tape: &AttnTape,
    params: &BlockParams,
    config: &ModelConfig,
    rope: &Rope,
    d_out: &Matrix,
) -> Result<(Matrix, AttnGrads)> {
    let layout = config.layout();
    let hd = config.head_dim;
    let heads = config.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let t = tape.x.rows();

    let w_o = tape.h.t_mul(d_out);
    let dh = d_out.mul_t(&params.w_o);

    let mut dq = Matrix::zeros(t, config.d_model);
    let mut dk = Matrix::zeros(t, config.d_model);
    let mut dv = Matrix::zeros(t, config.d_model);
    for head in 0..heads {
        let c0 = head * hd;
        let a = &tape.attn[head];
        let dh_h = dh.col_block(c0, c0 + hd);
        let vh = tape.v.col_block(c0, c0 + hd);
        dv.set_col_block(c0, &a.t_mul(&dh_h));
        let da = dh_h.mul_t(&vh);
        let mut ds = Matrix::zeros(t, t);
        for r in 0..t {
            let row = softmax_jvp(a.row(r), da.row(r));
            ds.row_mut(r).copy_from_slice(&row);
        }
        ds.scale_in_place(scale);
        let dq_hat = ds.mul(&tape.k_hat[head]);
        let dk_hat = ds.t_mul(&tape.q_hat[head]);
        dq.set_col_block(
            c0,
            &rmsnorm_rows_backward(&tape.q_rot[head], &tape.q_inv[head], &dq_hat),
        );
        dk.set_col_block(
            c0,
            &rmsnorm_rows_backward(&tape.k_rot[head], &tape.k_inv[head], &dk_hat),
        );
    }
    let dq = rope.apply_transpose(&dq, heads, &layout)?;
    let dk = rope.apply_transpose(&dk, heads, &layout)?;

    let grads = AttnGrads {
        w_q: tape.x.t_mul(&dq),
        w_k: tape.x.t_mul(&dk),
        w_v: tape.x.t_mul(&dv),
        w_o,
    };
    let mut dx = dq.mul_t(&params.w_q);
    dx.add_assign(&dk.mul_t(&params.w_k));
    dx.add_assign(&dv.mul_t(&params.w_v));
    Ok((dx, grads))
}
