//! SwiGLU feed-forward: `[g, v] = x W_13`, `FFN(x) = (SiLU(g) ⊙ v) W_2`.

use super::params::BlockParams;
use crate::numerics::{silu, silu_grad, Matrix};

#[derive(Clone, Debug)]
pub struct FfnTape {
    pub x: Matrix,
    pub g: Matrix,
    pub v: Matrix,
    /// `SiLU(g) ⊙ v`, the input of `W_2`.
    pub h: Matrix,
}

#[derive(Clone, Debug)]
pub struct FfnGrads {
    pub w_13: Matrix,
    pub w_2: Matrix,
}

pub fn ffn_forward(x: &Matrix, params: &BlockParams) -> (Matrix, FfnTape) {
    let f = params.w_2.rows();
    let u = x.mul(&params.w_13);
    let g = u.col_block(0, f);
    let v = u.col_block(f, 2 * f);
    let h = g.map(silu).hadamard(&v);
    let out = h.mul(&params.w_2);
    (out, FfnTape { x: x.clone(), g, v, h })
}

pub fn ffn_backward(tape: &FfnTape, params: &BlockParams, d_out: &Matrix) -> (Matrix, FfnGrads) {
    let f = params.w_2.rows();
    let w_2 = tape.h.t_mul(d_out);
    let dh = d_out.mul_t(&params.w_2);
    let mut du = Matrix::zeros(tape.x.rows(), 2 * f);
    for r in 0..du.rows() {
        let (g, v, d) = (tape.g.row(r), tape.v.row(r), dh.row(r));
        let row = du.row_mut(r);
        for c in 0..f {
            row[c] = d[c] * v[c] * silu_grad(g[c]);
            row[f + c] = d[c] * silu(g[c]);
        }
    }
    let w_13 = tape.x.t_mul(&du);
    let dx = du.mul_t(&params.w_13);
    (dx, FfnGrads { w_13, w_2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{InitMode, ModelConfig};
    use crate::numerics::Rng;

    fn params(rng: &mut Rng) -> BlockParams {
        let config = ModelConfig {
            d_model: 4,
            heads: 1,
            head_dim: 4,
            ffn_dim: 3,
            init_mode: InitMode::Standard,
            ..ModelConfig::default()
        };
        let mut p = BlockParams::init(&config, rng);
        p.w_2 = rng.normal_matrix(3, 4, 1.0);
        p
    }

    #[test]
    fn zero_writer_and_zero_gate() {
        let mut rng = Rng::new(1);
        let mut p = params(&mut rng);
        let x = rng.normal_matrix(5, 4, 1.0);
        p.w_2 = Matrix::zeros(3, 4);
        assert_eq!(ffn_forward(&x, &p).0.max_abs(), 0.0);

        let mut p = params(&mut rng);
        for r in 0..4 {
            for c in 0..3 {
                p.w_13[(r, c)] = 0.0;
            }
        }
        assert_eq!(ffn_forward(&x, &p).0.max_abs(), 0.0);
    }

    #[test]
    fn matches_scalar_loops() {
        let mut rng = Rng::new(2);
        let p = params(&mut rng);
        let x = rng.normal_matrix(6, 4, 1.0);
        let (out, _) = ffn_forward(&x, &p);
        for t in 0..6 {
            for o in 0..4 {
                let mut acc = 0.0;
                for j in 0..3 {
                    let mut g = 0.0;
                    let mut v = 0.0;
                    for i in 0..4 {
                        g += x[(t, i)] * p.w_13[(i, j)];
                        v += x[(t, i)] * p.w_13[(i, 3 + j)];
                    }
                    acc += g / (1.0 + (-g).exp()) * v * p.w_2[(j, o)];
                }
                assert!((out[(t, o)] - acc).abs() <= 1e-12);
            }
        }
    }
}
