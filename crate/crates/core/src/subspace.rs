//! Token-space projector algebra.
//!
//! `J = 𝟏𝟏ᵀ/T` averages over tokens and `P = I − J` removes that average.
//! The segment-wise variants average within the image and text groups
//! separately. On top of the projectors sit the writer-gradient mode
//! decomposition (GMD), the alignment-amplification audit and the softmax
//! null-space probe.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{cosine, dot, norm, softmax_jvp, Matrix};

/// Token counts of the `[image; text]` sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub image_count: usize,
    pub text_count: usize,
}

impl SegmentLayout {
    pub fn new(image_count: usize, text_count: usize) -> Self {
        Self {
            image_count,
            text_count,
        }
    }

    pub fn total(&self) -> usize {
        self.image_count + self.text_count
    }

    pub fn image_range(&self) -> Range<usize> {
        0..self.image_count
    }

    pub fn text_range(&self) -> Range<usize> {
        self.image_count..self.total()
    }

    /// Non-empty segments in sequence order.
    pub fn segments(&self) -> Vec<Range<usize>> {
        [self.image_range(), self.text_range()]
            .into_iter()
            .filter(|r| !r.is_empty())
            .collect()
    }

    pub fn check(&self, tokens: usize) -> Result<()> {
        if self.total() != tokens {
            return Err(Error::LayoutMismatch {
                expected: self.total(),
                actual: tokens,
            });
        }
        Ok(())
    }
}

/// Which token-mean projector to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    Global,
    Segmented(SegmentLayout),
}

impl Projection {
    pub fn segments(&self, tokens: usize) -> Result<Vec<Range<usize>>> {
        match self {
            Projection::Global => Ok(vec![0..tokens]),
            Projection::Segmented(layout) => {
                layout.check(tokens)?;
                Ok(layout.segments())
            }
        }
    }
}

/// `X = μ(X) + c(X)`; the mean part is stored at full `T×D` shape.
#[derive(Clone, Debug)]
pub struct SubspaceSplit {
    pub mean_part: Matrix,
    pub centered_part: Matrix,
}

/// Per-segment column means, broadcast back to every token of the segment.
pub fn mean_over(x: &Matrix, segments: &[Range<usize>]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for seg in segments {
        let mean = x.col_mean_range(seg.start, seg.end);
        for r in seg.clone() {
            out.row_mut(r).copy_from_slice(&mean);
        }
    }
    out
}

pub fn centered_over(x: &Matrix, segments: &[Range<usize>]) -> Matrix {
    x.sub(&mean_over(x, segments))
}

/// `J X` with the global projector.
pub fn mean_global(x: &Matrix) -> Matrix {
    mean_over(x, &[0..x.rows()])
}

/// `P X` with the global projector.
pub fn centered_global(x: &Matrix) -> Matrix {
    centered_over(x, &[0..x.rows()])
}

pub fn split_global(x: &Matrix) -> SubspaceSplit {
    let mean_part = mean_global(x);
    let centered_part = x.sub(&mean_part);
    SubspaceSplit {
        mean_part,
        centered_part,
    }
}

pub fn split_segmented(x: &Matrix, layout: &SegmentLayout) -> Result<SubspaceSplit> {
    layout.check(x.rows())?;
    let mean_part = mean_over(x, &layout.segments());
    let centered_part = x.sub(&mean_part);
    Ok(SubspaceSplit {
        mean_part,
        centered_part,
    })
}

pub fn apply_mean(x: &Matrix, projection: Projection) -> Result<Matrix> {
    Ok(mean_over(x, &projection.segments(x.rows())?))
}

/// Dense `J` (global) of size `T×T`.
pub fn j_global(tokens: usize) -> Matrix {
    Matrix::filled(tokens, tokens, 1.0 / tokens as f64)
}

pub fn p_global(tokens: usize) -> Matrix {
    Matrix::identity(tokens).sub(&j_global(tokens))
}

/// Dense `J_seg = blkdiag(J_ℐ, J_𝒯)`.
pub fn j_segmented(layout: &SegmentLayout) -> Matrix {
    let t = layout.total();
    let mut j = Matrix::zeros(t, t);
    for seg in layout.segments() {
        let w = 1.0 / seg.len() as f64;
        for r in seg.clone() {
            for c in seg.clone() {
                j[(r, c)] = w;
            }
        }
    }
    j
}

pub fn p_segmented(layout: &SegmentLayout) -> Matrix {
    Matrix::identity(layout.total()).sub(&j_segmented(layout))
}

/// Multiplies every column `d` by `gate[d]` (feature-wise broadcast over tokens).
pub fn scale_features(x: &Matrix, gate: &[f64]) -> Matrix {
    assert_eq!(x.cols(), gate.len(), "gate width");
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, g) in out.row_mut(r).iter_mut().zip(gate) {
            *v *= g;
        }
    }
    out
}

/// Mean-coherent / centered split of a writer gradient `Σ δ_t y_tᵀ`.
///
/// Matrices are `m×n` (adjoint dimension × input dimension).
#[derive(Clone, Debug, Serialize)]
pub struct GradModeReport {
    /// `T δ̄ ȳᵀ`, rank ≤ 1.
    pub delta_w_mu: Matrix,
    /// `Σ δ̃_t ỹ_tᵀ`.
    pub delta_w_c: Matrix,
    pub g_mean: f64,
    pub g_ctr: f64,
    pub tokens: usize,
}

impl GradModeReport {
    /// `ΔW_μ + ΔW_c`.
    pub fn reconstruct(&self) -> Matrix {
        self.delta_w_mu.add(&self.delta_w_c)
    }

    /// `G_mean / G_ctr`, infinite when the centered part vanishes.
    pub fn ratio(&self) -> f64 {
        if self.g_ctr == 0.0 {
            f64::INFINITY
        } else {
            self.g_mean / self.g_ctr
        }
    }
}

/// `Σ_t δ_t y_tᵀ` for per-token rows `y` (`T×n`) and `delta` (`T×m`).
pub fn raw_writer_gradient(y: &Matrix, delta: &Matrix) -> Result<Matrix> {
    if y.rows() != delta.rows() {
        return Err(dim_err(
            "raw_writer_gradient",
            format!("{} inputs vs {} adjoints", y.rows(), delta.rows()),
        ));
    }
    Ok(delta.t_mul(y))
}

/// Splits the writer gradient into its mean-coherent and centered modes.
pub fn gmd_decompose(y: &Matrix, delta: &Matrix) -> Result<GradModeReport> {
    let t = y.rows();
    if t != delta.rows() {
        return Err(dim_err(
            "gmd_decompose",
            format!("{} inputs vs {} adjoints", t, delta.rows()),
        ));
    }
    if t == 0 {
        return Err(Error::TooFewTokens("gmd_decompose needs T ≥ 1".into()));
    }
    let y_bar = y.col_mean();
    let d_bar = delta.col_mean();
    let tf = t as f64;
    let delta_w_mu = Matrix::from_fn(d_bar.len(), y_bar.len(), |i, j| tf * d_bar[i] * y_bar[j]);
    let y_c = centered_global(y);
    let d_c = centered_global(delta);
    let delta_w_c = d_c.t_mul(&y_c);
    Ok(GradModeReport {
        g_mean: delta_w_mu.frobenius_norm(),
        g_ctr: delta_w_c.frobenius_norm(),
        delta_w_mu,
        delta_w_c,
        tokens: t,
    })
}

/// Cross-token alignment of a writer gradient.
#[derive(Clone, Debug, Serialize)]
pub struct AlignmentAudit {
    /// `‖Σ δ_t y_tᵀ‖²_F / Σ_t ‖δ_t‖²‖y_t‖²`.
    pub amplification_a: f64,
    /// The same quantity through the Rayleigh form `wᵀMw / ‖w‖²`.
    pub amplification_rayleigh: f64,
    /// Mean of `M_ts` over ordered pairs `s ≠ t`.
    pub kappa: f64,
    /// Mean of `|M_ts|` over ordered pairs `s ≠ t`.
    pub kappa_hat: f64,
    /// `w_t = ‖δ_t‖‖y_t‖` of the surviving tokens.
    pub per_token_w: Vec<f64>,
    /// Tokens that took part.
    pub tokens: usize,
    /// Tokens dropped for `w_t < 1e-30`.
    pub dropped: usize,
}

impl AlignmentAudit {
    /// `(T − 1)·κ̂`, the absolute-coherence envelope.
    pub fn envelope(&self) -> f64 {
        (self.tokens as f64 - 1.0) * self.kappa_hat
    }

    /// `(T − 1)·κ`, the equal-magnitude prediction of `𝒜 − 1`.
    pub fn equal_magnitude_prediction(&self) -> f64 {
        (self.tokens as f64 - 1.0) * self.kappa
    }
}

const MIN_TOKEN_WEIGHT: f64 = 1e-30;

pub fn alignment_audit(y: &Matrix, delta: &Matrix) -> Result<AlignmentAudit> {
    if y.rows() != delta.rows() {
        return Err(dim_err(
            "alignment_audit",
            format!("{} inputs vs {} adjoints", y.rows(), delta.rows()),
        ));
    }
    let mut keep = Vec::new();
    let mut w = Vec::new();
    for t in 0..y.rows() {
        let wt = norm(y.row(t)) * norm(delta.row(t));
        if wt >= MIN_TOKEN_WEIGHT {
            keep.push(t);
            w.push(wt);
        }
    }
    let n = keep.len();
    if n < 2 {
        return Err(Error::TooFewTokens(format!(
            "alignment_audit needs 2 tokens with nonzero magnitude, found {n}"
        )));
    }

    // Frobenius route.
    let mut grad = Matrix::zeros(delta.cols(), y.cols());
    for &t in &keep {
        let (yt, dt) = (y.row(t), delta.row(t));
        for (i, di) in dt.iter().enumerate() {
            let row = grad.row_mut(i);
            for (g, yj) in row.iter_mut().zip(yt) {
                *g += di * yj;
            }
        }
    }
    let diag: f64 = w.iter().map(|v| v * v).sum();
    let amplification_a = grad.frobenius_sq() / diag;

    // Rayleigh route.
    let mut quad = 0.0;
    let mut m_sum = 0.0;
    let mut m_abs = 0.0;
    for (a, &s) in keep.iter().enumerate() {
        for (b, &t) in keep.iter().enumerate() {
            let m = if a == b {
                1.0
            } else {
                let cy = cosine(y.row(s), y.row(t)).unwrap_or(0.0);
                let cd = cosine(delta.row(s), delta.row(t)).unwrap_or(0.0);
                cy * cd
            };
            quad += w[a] * w[b] * m;
            if a != b {
                m_sum += m;
                m_abs += m.abs();
            }
        }
    }
    let pairs = (n * (n - 1)) as f64;
    Ok(AlignmentAudit {
        amplification_a,
        amplification_rayleigh: quad / diag,
        kappa: m_sum / pairs,
        kappa_hat: m_abs / pairs,
        per_token_w: w,
        tokens: n,
        dropped: y.rows() - n,
    })
}

/// Logit gradient `∂L/∂S_i = J_sm(a_i)·(∂L/∂a_i)` for one attention row, with
/// `∂L/∂a_ij = ⟨output_adjoint, V_j⟩`.
pub fn softmax_nullspace_probe(values: &Matrix, attn_row: &[f64], output_adjoint: &[f64]) -> Result<Vec<f64>> {
    if values.rows() != attn_row.len() || values.cols() != output_adjoint.len() {
        return Err(dim_err(
            "softmax_nullspace_probe",
            format!(
                "values {}x{}, attention row {}, adjoint {}",
                values.rows(),
                values.cols(),
                attn_row.len(),
                output_adjoint.len()
            ),
        ));
    }
    let d_attn: Vec<f64> = (0..values.rows()).map(|j| dot(output_adjoint, values.row(j))).collect();
    Ok(softmax_jvp(attn_row, &d_attn))
}

/// `∇W_O = Σ_i g_i H_iᵀ` with `H = attn·values`, in `(input × output)`
/// orientation to match `out = H·W_O`.
pub fn writer_bypass_gradient(values: &Matrix, attn: &Matrix, writer_adjoints: &Matrix) -> Result<Matrix> {
    if attn.cols() != values.rows() || attn.rows() != writer_adjoints.rows() {
        return Err(dim_err(
            "writer_bypass_check",
            format!(
                "attn {}x{}, values {}x{}, adjoints {}x{}",
                attn.rows(),
                attn.cols(),
                values.rows(),
                values.cols(),
                writer_adjoints.rows(),
                writer_adjoints.cols()
            ),
        ));
    }
    let h = attn.mul(values);
    Ok(h.t_mul(writer_adjoints))
}

/// `‖∇W_O‖_F` of [`writer_bypass_gradient`].
pub fn writer_bypass_check(values: &Matrix, attn: &Matrix, writer_adjoints: &Matrix) -> Result<f64> {
    Ok(writer_bypass_gradient(values, attn, writer_adjoints)?.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, row_softmax, Rng};

    fn stochastic(rng: &mut Rng, t: usize) -> Matrix {
        row_softmax(&rng.normal_matrix(t, t, 2.0))
    }

    #[test]
    fn split_global_examples() {
        let x = Matrix::from_fn(5, 3, |_, c| c as f64 + 0.5);
        let s = split_global(&x);
        assert!(s.centered_part.max_abs() == 0.0);
        let y = Matrix::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap();
        assert!(split_global(&y).mean_part.max_abs() == 0.0);
        let mut rng = Rng::new(1);
        let z = rng.normal_matrix(9, 4, 1.0);
        let s = split_global(&z);
        assert!(s.mean_part.add(&s.centered_part).sub(&z).max_abs() <= 1e-14);
    }

    #[test]
    fn split_segmented_examples() {
        let layout = SegmentLayout::new(3, 2);
        let x = Matrix::from_fn(5, 2, |r, _| if r < 3 { 2.0 } else { -7.0 });
        let s = split_segmented(&x, &layout).unwrap();
        assert_eq!(s.centered_part.max_abs(), 0.0);
        assert_eq!(s.mean_part, x);
        // global centering leaves the two segment means in place
        let g = centered_global(&x);
        let seg_means = mean_over(&g, &layout.segments());
        assert!(seg_means.max_abs() > 1.0);

        let mut rng = Rng::new(2);
        let z = rng.normal_matrix(5, 3, 1.0);
        let after = mean_global(&split_segmented(&z, &layout).unwrap().mean_part);
        assert!(after.sub(&mean_global(&z)).max_abs() <= 1e-14);
        assert!(matches!(
            split_segmented(&z, &SegmentLayout::new(2, 2)),
            Err(Error::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn gmd_identical_tokens() {
        let y_row = [1.0, 2.0, -1.0];
        let d_row = [0.5, -0.25];
        let t = 6;
        let y = Matrix::from_fn(t, 3, |_, c| y_row[c]);
        let d = Matrix::from_fn(t, 2, |_, c| d_row[c]);
        let r = gmd_decompose(&y, &d).unwrap();
        assert!(r.delta_w_c.max_abs() < 1e-15);
        let expected = t as f64 * norm(&y_row) * norm(&d_row);
        assert!((r.g_mean - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn gmd_zero_mean_inputs() {
        let y = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0]]).unwrap();
        let d = Matrix::from_rows(&[vec![3.0], vec![-3.0]]).unwrap();
        let r = gmd_decompose(&y, &d).unwrap();
        assert_eq!(r.g_mean, 0.0);
        assert!(matches!(
            gmd_decompose(&Matrix::zeros(0, 2), &Matrix::zeros(0, 1)),
            Err(Error::TooFewTokens(_))
        ));
    }

    #[test]
    fn gmd_cross_terms_vanish() {
        let mut rng = Rng::new(3);
        let y = rng.normal_matrix(11, 5, 1.0).add(&Matrix::filled(11, 5, 0.7));
        let d = rng.normal_matrix(11, 4, 1.0).add(&Matrix::filled(11, 4, -0.3));
        let r = gmd_decompose(&y, &d).unwrap();
        // four-term expansion
        let yb = y.col_mean();
        let db = d.col_mean();
        let yc = centered_global(&y);
        let dc = centered_global(&d);
        let mut cross1 = Matrix::zeros(4, 5);
        let mut cross2 = Matrix::zeros(4, 5);
        for t in 0..11 {
            for i in 0..4 {
                for j in 0..5 {
                    cross1[(i, j)] += db[i] * yc[(t, j)];
                    cross2[(i, j)] += dc[(t, i)] * yb[j];
                }
            }
        }
        assert!(cross1.frobenius_norm() <= 1e-12);
        assert!(cross2.frobenius_norm() <= 1e-12);
        let raw = raw_writer_gradient(&y, &d).unwrap();
        assert!(r.reconstruct().sub(&raw).frobenius_norm() <= 1e-12 * raw.frobenius_norm());
    }

    #[test]
    fn alignment_coherent_and_orthogonal() {
        let t = 7;
        let y = Matrix::from_fn(t, 3, |_, c| [1.0, -2.0, 0.5][c]);
        let d = Matrix::from_fn(t, 2, |_, c| [0.3, 0.4][c]);
        let a = alignment_audit(&y, &d).unwrap();
        assert!((a.amplification_a - t as f64).abs() < 1e-12);
        assert!((a.kappa - 1.0).abs() < 1e-12);

        let y = Matrix::identity(4);
        let d = Matrix::from_fn(4, 2, |r, _| 1.0 + r as f64);
        let a = alignment_audit(&y, &d).unwrap();
        assert!((a.amplification_a - 1.0).abs() < 1e-14);
        assert!(a.kappa.abs() < 1e-15);
    }

    #[test]
    fn alignment_drops_zero_tokens() {
        let mut y = Matrix::identity(3);
        y.row_mut(1).fill(0.0);
        let d = Matrix::filled(3, 2, 1.0);
        let a = alignment_audit(&y, &d).unwrap();
        assert_eq!(a.dropped, 1);
        assert_eq!(a.tokens, 2);
        let y1 = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        assert!(matches!(
            alignment_audit(&y1, &Matrix::filled(2, 1, 1.0)),
            Err(Error::TooFewTokens(_))
        ));
    }

    #[test]
    fn excess_to_frobenius_amplification() {
        // 𝒜 − 1 = 167 corresponds to a Frobenius-norm amplification of √168.
        let amp = (167.0f64 + 1.0).sqrt();
        assert!((amp - 12.96).abs() < 0.01);
    }

    #[test]
    fn nullspace_probe_examples() {
        let mut rng = Rng::new(4);
        let v_bar: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let values = Matrix::from_fn(6, 5, |_, c| v_bar[c]);
        let a = row_softmax(&rng.normal_matrix(1, 6, 1.0));
        let g: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let out = softmax_nullspace_probe(&values, a.row(0), &g).unwrap();
        assert!(out.iter().all(|v| v.abs() <= 1e-14));
        let zero = softmax_nullspace_probe(&values, a.row(0), &[0.0; 5]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nullspace_probe_is_linear_in_perturbation() {
        let mut rng = Rng::new(5);
        let v_bar: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let a = row_softmax(&rng.normal_matrix(1, 5, 1.0));
        let g: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let mut slopes = Vec::new();
        for eps in [1e-2, 1e-3, 1e-4, 1e-5] {
            let mut values = Matrix::from_fn(5, 4, |_, c| v_bar[c]);
            values[(2, 1)] += eps;
            let out = softmax_nullspace_probe(&values, a.row(0), &g).unwrap();
            slopes.push(norm(&out) / eps);
        }
        for s in &slopes[1..] {
            assert!((s - slopes[0]).abs() < 1e-6 * slopes[0]);
        }
    }

    #[test]
    fn writer_bypass_examples() {
        let mut rng = Rng::new(6);
        let v_bar: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let values = Matrix::from_fn(5, 3, |_, c| v_bar[c]);
        let attn = stochastic(&mut rng, 5);
        let adj = rng.normal_matrix(5, 4, 1.0);
        assert!(writer_bypass_check(&values, &attn, &adj).unwrap() > 0.0);
        for i in 0..5 {
            let out = softmax_nullspace_probe(&values, attn.row(i), &[0.1, 0.2, 0.3]).unwrap();
            assert!(out.iter().all(|v| v.abs() <= 1e-14));
        }
        assert_eq!(writer_bypass_check(&values, &attn, &Matrix::zeros(5, 4)).unwrap(), 0.0);
    }

    #[test]
    fn writer_bypass_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let values = rng.normal_matrix(4, 3, 1.0);
        let attn = stochastic(&mut rng, 4);
        let adj = rng.normal_matrix(4, 2, 1.0);
        let w_o = rng.normal_matrix(3, 2, 1.0);
        let grad = writer_bypass_gradient(&values, &attn, &adj).unwrap();
        let h = attn.mul(&values);
        let report = finite_difference_check(
            |w| {
                let w = Matrix::from_vec(3, 2, w.to_vec()).unwrap();
                dot(h.mul(&w).data(), adj.data())
            },
            w_o.data(),
            grad.data(),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
