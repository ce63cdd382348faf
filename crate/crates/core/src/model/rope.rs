//! 2D rotary embedding for image tokens.
//!
//! Each head's `head_dim` channels are split in half: the first half rotates
//! with the token's grid row, the second half with its grid column. Inside
//! each half, adjacent channel pairs `(2i, 2i+1)` rotate at frequency
//! `θ^(−2i/half)`. Text tokens are left unrotated.

use crate::error::{dim_err, Error, Result};
use crate::numerics::Matrix;
use crate::subspace::SegmentLayout;

/// Precomputed cos/sin tables for one grid and head size.
#[derive(Clone, Debug)]
pub struct Rope {
    grid: (usize, usize),
    head_dim: usize,
    /// `[token][pair]` with `head_dim / 2` pairs per token.
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    pub fn new(grid: (usize, usize), head_dim: usize, theta: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(4) || head_dim == 0 {
            return Err(Error::Config(format!(
                "2D RoPE needs head_dim divisible by 4, got {head_dim}"
            )));
        }
        let (h, w) = grid;
        let half = head_dim / 2;
        let quarter = head_dim / 4;
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(h * w * pairs);
        let mut sin = Vec::with_capacity(h * w * pairs);
        for p in 0..h * w {
            let (row, col) = ((p / w) as f64, (p % w) as f64);
            for pos in [row, col] {
                for i in 0..quarter {
                    let freq = theta.powf(-2.0 * i as f64 / half as f64);
                    let angle = pos * freq;
                    cos.push(angle.cos());
                    sin.push(angle.sin());
                }
            }
        }
        Ok(Self {
            grid,
            head_dim,
            cos,
            sin,
        })
    }

    pub fn image_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    fn rotate(&self, x: &Matrix, heads: usize, layout: &SegmentLayout, sign: f64) -> Result<Matrix> {
        if layout.image_count != self.image_tokens() {
            return Err(dim_err(
                "rope_2d_apply",
                format!(
                    "grid {}x{} covers {} tokens but layout has {} image tokens",
                    self.grid.0,
                    self.grid.1,
                    self.image_tokens(),
                    layout.image_count
                ),
            ));
        }
        layout.check(x.rows())?;
        if x.cols() != heads * self.head_dim {
            return Err(dim_err(
                "rope_2d_apply",
                format!("{} columns for {heads} heads of {}", x.cols(), self.head_dim),
            ));
        }
        let pairs = self.head_dim / 2;
        let mut out = x.clone();
        for p in 0..layout.image_count {
            let cos = &self.cos[p * pairs..(p + 1) * pairs];
            let sin = &self.sin[p * pairs..(p + 1) * pairs];
            let row = out.row_mut(p);
            for h in 0..heads {
                let head = &mut row[h * self.head_dim..(h + 1) * self.head_dim];
                for k in 0..pairs {
                    let (a, b) = (head[2 * k], head[2 * k + 1]);
                    let (c, s) = (cos[k], sign * sin[k]);
                    head[2 * k] = a * c - b * s;
                    head[2 * k + 1] = a * s + b * c;
                }
            }
        }
        Ok(out)
    }

    /// Rotates the image rows of a `T×(heads·head_dim)` query or key tensor.
    pub fn apply(&self, x: &Matrix, heads: usize, layout: &SegmentLayout) -> Result<Matrix> {
        self.rotate(x, heads, layout, 1.0)
    }

    /// Transpose (inverse) rotation, used by the backward pass.
    pub fn apply_transpose(&self, x: &Matrix, heads: usize, layout: &SegmentLayout) -> Result<Matrix> {
        self.rotate(x, heads, layout, -1.0)
    }
}

/// One-shot 2D RoPE application.
pub fn rope_2d_apply(
    x: &Matrix,
    heads: usize,
    head_dim: usize,
    grid: (usize, usize),
    layout: &SegmentLayout,
    theta: f64,
) -> Result<Matrix> {
    Rope::new(grid, head_dim, theta)?.apply(x, heads, layout)
}
