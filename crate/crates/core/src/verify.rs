//! The exact-identity suite: every algebraic identity the library relies on,
//! checked on random instances in 64-bit arithmetic, one row per identity.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusedmerge::{fused_merge_backward, fused_merge_forward};
use crate::model::{
    pre_norm_merge, pre_norm_merge_backward, residual_merge, residual_merge_backward, Gates, InitMode, MergeKind,
    ModelConfig, ModelParams, ResidualMode,
};
use crate::numerics::{finite_difference_check_with, row_softmax, Matrix, Rng, Stencil, RMS_EPS};
use crate::subspace::{
    alignment_audit, centered_global, centered_over, gmd_decompose, j_global, j_segmented, mean_global, mean_over,
    p_global, p_segmented, raw_writer_gradient, scale_features, softmax_nullspace_probe, writer_bypass_check,
    GradModeReport, SegmentLayout,
};
use crate::trainer::{clip_global_norm, writer_modes};

/// Deliberate faults used to show that the suite detects them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Negates the centered component returned by the mode decomposition.
    GmdSignFlip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<34} {:>6} {:>12} {:>10}  result",
            "identity", "cases", "max error", "tolerance"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<34} {:>6} {:>12.3e} {:>10.0e}  {}",
                r.name,
                r.cases,
                r.max_error,
                r.tolerance,
                if r.passed { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

struct Row {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    max_error: f64,
    /// Extra boolean conditions that must hold on every case.
    ok: bool,
}

impl Row {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            cases: 0,
            max_error: 0.0,
            ok: true,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        // NaN compares false, so fold it in explicitly.
        if err.is_nan() || err > self.max_error {
            self.max_error = if err.is_nan() { f64::INFINITY } else { err };
        }
    }

    fn require(&mut self, cond: bool) {
        self.ok &= cond;
    }

    fn finish(self) -> VerifyRow {
        VerifyRow {
            name: self.name.into(),
            cases: self.cases,
            passed: self.ok && self.max_error <= self.tolerance,
            max_error: self.max_error,
            tolerance: self.tolerance,
        }
    }
}

fn stochastic(rng: &mut Rng, t: usize) -> Matrix {
    row_softmax(&rng.normal_matrix(t, t, 2.0))
}

fn random_layout(rng: &mut Rng, max_img: usize, max_txt: usize) -> SegmentLayout {
    SegmentLayout::new(1 + rng.below(max_img), 1 + rng.below(max_txt))
}

fn vector(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(lo, hi)).collect()
}

fn rel(diff: f64, scale: f64) -> f64 {
    diff / scale.max(1e-300)
}

fn decompose(y: &Matrix, delta: &Matrix, mutation: Option<Mutation>) -> Result<GradModeReport> {
    let mut rep = gmd_decompose(y, delta)?;
    if mutation == Some(Mutation::GmdSignFlip) {
        rep.delta_w_c.scale_in_place(-1.0);
    }
    Ok(rep)
}

/// Largest deviation of `m` from rank one, relative to `‖m‖_F`: every row is
/// projected off the largest row.
fn rank_one_defect(m: &Matrix) -> f64 {
    let total = m.frobenius_norm();
    if total == 0.0 {
        return 0.0;
    }
    let pivot = (0..m.rows())
        .max_by(|&a, &b| crate::numerics::norm(m.row(a)).total_cmp(&crate::numerics::norm(m.row(b))))
        .unwrap_or(0);
    let p = m.row(pivot);
    let pp = crate::numerics::dot(p, p);
    let mut worst: f64 = 0.0;
    for r in 0..m.rows() {
        let row = m.row(r);
        let c = crate::numerics::dot(row, p) / pp;
        let res: f64 = row.iter().zip(p).map(|(a, b)| (a - c * b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(res);
    }
    worst / total
}

fn gmd_rows(rng: &mut Rng, mutation: Option<Mutation>) -> Result<Vec<VerifyRow>> {
    let mut recon = Row::new("gmd_reconstruction", 1e-12);
    let mut rank = Row::new("gmd_mean_mode_rank_one", 1e-12);
    for _ in 0..100 {
        let t = 1 + rng.below(64);
        let (n, m) = (1 + rng.below(64), 1 + rng.below(64));
        let y = rng.normal_matrix(t, n, 1.0);
        let delta = rng.normal_matrix(t, m, 1.0);
        let raw = raw_writer_gradient(&y, &delta)?;
        let rep = decompose(&y, &delta, mutation)?;
        let diff = raw.sub(&rep.delta_w_mu).sub(&rep.delta_w_c).frobenius_norm();
        recon.record(rel(diff, raw.frobenius_norm()));
        rank.record(rank_one_defect(&rep.delta_w_mu));
    }
    Ok(vec![recon.finish(), rank.finish()])
}

fn attention_rows(rng: &mut Rng) -> Result<Vec<VerifyRow>> {
    let mut p1 = Row::new("mean_preserved_by_attention", 1e-13);
    let mut p2 = Row::new("centered_part_through_PAP", 1e-13);
    for _ in 0..100 {
        let t = 2 + rng.below(32);
        let d = 1 + rng.below(16);
        let a = stochastic(rng, t);
        let x = rng.normal_matrix(t, d, 1.0);
        let mu = mean_global(&x);
        p1.record(a.mul(&mu).sub(&mu).frobenius_norm());
        let p = p_global(t);
        let lhs = centered_global(&a.mul(&x));
        let rhs = p.mul(&a).mul(&p).mul(&x);
        p2.record(lhs.sub(&rhs).frobenius_norm());
    }

    let mut lemma = Row::new("softmax_nullspace_and_writer_bypass", 1e-14);
    for _ in 0..100 {
        let t = 2 + rng.below(16);
        let dv = 1 + rng.below(8);
        let v_bar: Vec<f64> = vector(rng, dv, -1.0, 1.0);
        let values = Matrix::from_fn(t, dv, |_, c| v_bar[c]);
        let attn = stochastic(rng, t);
        let adj = rng.normal_matrix(t, dv, 1.0);
        let mut worst: f64 = 0.0;
        for i in 0..t {
            let g = softmax_nullspace_probe(&values, attn.row(i), adj.row(i))?;
            worst = worst.max(g.iter().fold(0.0, |m: f64, v| m.max(v.abs())));
        }
        lemma.record(worst);
        lemma.require(writer_bypass_check(&values, &attn, &adj)? > 0.0);
    }
    Ok(vec![p1.finish(), p2.finish(), lemma.finish()])
}

fn alignment_rows(rng: &mut Rng) -> Result<Vec<VerifyRow>> {
    let mut routes = Row::new("alignment_frobenius_vs_rayleigh", 1e-10);
    let mut law = Row::new("alignment_equal_magnitude_law", 1e-10);
    let mut bound = Row::new("alignment_envelope_bound", 0.0);
    for k in 0..100 {
        let t = 2 + rng.below(31);
        let (n, m) = (1 + rng.below(16), 1 + rng.below(16));
        let mut y = rng.normal_matrix(t, n, 1.0);
        let mut delta = rng.normal_matrix(t, m, 1.0);
        // Half the draws share a common direction so alignment is strong.
        if k % 2 == 1 {
            let (cy, cd) = (vector(rng, n, -1.0, 1.0), vector(rng, m, -1.0, 1.0));
            for r in 0..t {
                y.row_mut(r)
                    .iter_mut()
                    .zip(&cy)
                    .for_each(|(a, b)| *a = 0.3 * *a + 2.0 * b);
                delta
                    .row_mut(r)
                    .iter_mut()
                    .zip(&cd)
                    .for_each(|(a, b)| *a = 0.3 * *a + 2.0 * b);
            }
        }
        let audit = alignment_audit(&y, &delta)?;
        routes.record(rel(
            (audit.amplification_a - audit.amplification_rayleigh).abs(),
            audit.amplification_a.abs().max(1.0),
        ));
        for r in 0..t {
            let ny = crate::numerics::norm(y.row(r));
            let nd = crate::numerics::norm(delta.row(r));
            y.row_mut(r).iter_mut().for_each(|v| *v /= ny);
            delta.row_mut(r).iter_mut().for_each(|v| *v /= nd);
        }
        let eq = alignment_audit(&y, &delta)?;
        law.record((eq.amplification_a - 1.0 - eq.equal_magnitude_prediction()).abs());
        let excess = (eq.amplification_a - 1.0).abs() - eq.envelope();
        bound.record(excess.max(0.0) - 1e-12_f64.min(excess.max(0.0)));
    }
    Ok(vec![routes.finish(), law.finish(), bound.finish()])
}

fn split_gates(alpha: &[f64], beta: &[f64]) -> Gates {
    Gates::Split {
        alpha: Matrix::row_vector(alpha),
        beta: Matrix::row_vector(beta),
    }
}

fn merge_rows(rng: &mut Rng) -> Result<Vec<VerifyRow>> {
    let mut dynamics = Row::new("split_merge_forward_decoupling", 1e-12);
    let mut backward = Row::new("split_merge_backward_split", 1e-12);
    let mut layerscale = Row::new("layerscale_zero_branch_mean", 0.0);
    let mut rezero = Row::new("rezero_gmd_ratio_invariance", 1e-12);
    let mut segments = Row::new("segment_projector_identities", 1e-14);
    for _ in 0..100 {
        let layout = random_layout(rng, 12, 6);
        let segs = layout.segments();
        let (t, d) = (layout.total(), 1 + rng.below(12));
        let x = rng.normal_matrix(t, d, 1.0);
        let f = rng.normal_matrix(t, d, 1.0);
        let alpha = vector(rng, d, -0.5, 1.5);
        let beta = vector(rng, d, -0.5, 1.5);
        let gates = split_gates(&alpha, &beta);
        let z = pre_norm_merge(&x, &f, &gates, MergeKind::Mvsplit, &layout)?;
        let keep: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
        let jz = scale_features(&mean_over(&x, &segs), &keep).add(&scale_features(&mean_over(&f, &segs), &alpha));
        let pz = centered_over(&x, &segs).add(&scale_features(&centered_over(&f, &segs), &beta));
        dynamics.record(
            mean_over(&z, &segs)
                .sub(&jz)
                .max_abs()
                .max(centered_over(&z, &segs).sub(&pz).max_abs()),
        );

        let g = rng.normal_matrix(t, d, 1.0);
        let grads = pre_norm_merge_backward(&x, &f, &gates, MergeKind::Mvsplit, &layout, &g)?;
        let expected =
            scale_features(&centered_over(&g, &segs), &beta).add(&scale_features(&mean_over(&g, &segs), &alpha));
        backward.record(grads.df.sub(&expected).max_abs());

        let lambda = Gates::Channel {
            lambda: Matrix::row_vector(&vector(rng, d, -1.0, 1.0)),
        };
        let zl = pre_norm_merge(&x, &Matrix::zeros(t, d), &lambda, MergeKind::Layerscale, &layout)?;
        layerscale.record(mean_over(&zl, &segs).sub(&mean_over(&x, &segs)).max_abs());

        let n = 1 + rng.below(12);
        let y = rng.normal_matrix(t, n, 1.0);
        let mut ratios = Vec::new();
        let small = rng.uniform_range(1e-3, 0.5);
        let large = rng.uniform_range(2.0, 50.0);
        for l in [1.0, small, large] {
            let gate = Gates::Scalar {
                lambda: Matrix::filled(1, 1, l),
            };
            let df = pre_norm_merge_backward(&x, &f, &gate, MergeKind::Rezero, &layout, &g)?.df;
            let rep = gmd_decompose(&y, &df)?;
            ratios.push(rep.g_mean / rep.g_ctr);
        }
        rezero.record(
            ratios
                .iter()
                .map(|r| rel((r - ratios[0]).abs(), ratios[0]))
                .fold(0.0, f64::max),
        );

        let jg = j_global(t);
        let js = j_segmented(&layout);
        let ps = p_segmented(&layout);
        segments.record(jg.mul(&js).sub(&jg).max_abs().max(jg.mul(&ps).max_abs()));
    }
    Ok(vec![
        dynamics.finish(),
        backward.finish(),
        layerscale.finish(),
        rezero.finish(),
        segments.finish(),
    ])
}

fn fused_rows(rng: &mut Rng) -> Result<Vec<VerifyRow>> {
    let mut forward = Row::new("fused_merge_forward", 1e-13);
    let mut backward = Row::new("fused_merge_gradients", 1e-12);
    let mut fd = Row::new("fused_gate_gradients_vs_fd", 1e-6);
    for _ in 0..1000 {
        let layout = random_layout(rng, 12, 6);
        let (t, d) = (layout.total(), 1 + rng.below(16));
        let x = rng.normal_matrix(t, d, 1.0);
        let f = rng.normal_matrix(t, d, 1.0);
        let alpha = vector(rng, d, -0.5, 1.5);
        let beta = vector(rng, d, -0.5, 1.5);
        let gates = split_gates(&alpha, &beta);
        let composed = residual_merge(&x, &f, &gates, MergeKind::Mvsplit, &layout)?;
        let (out, cache) = fused_merge_forward(&x, &f, &alpha, &beta, &layout, RMS_EPS)?;
        forward.record(out.sub(&composed.x_next).max_abs());

        let up = rng.normal_matrix(t, d, 1.0);
        let reference = residual_merge_backward(&x, &f, &composed, &gates, MergeKind::Mvsplit, &layout, &up)?;
        let fused = fused_merge_backward(&cache, &up)?;
        let Gates::Split { alpha: da, beta: db } = &reference.gates else {
            unreachable!("split merge returns split gate gradients")
        };
        let pairs: [(&[f64], &[f64]); 4] = [
            (reference.dx.data(), fused.dx.data()),
            (reference.df.data(), fused.df.data()),
            (da.data(), &fused.d_alpha),
            (db.data(), &fused.d_beta),
        ];
        for (a, b) in pairs {
            let scale = a.iter().fold(1.0, |m: f64, v| m.max(v.abs()));
            let diff = a.iter().zip(b).fold(0.0, |m: f64, (p, q)| m.max((p - q).abs()));
            backward.record(diff / scale);
        }

        // With one channel the normalized output is nearly a sign function and
        // its gate gradients vanish below the difference quotient's roundoff.
        if fd.cases < 50 && d > 1 {
            let loss = |a: &[f64], b: &[f64]| -> f64 {
                let (o, _) = fused_merge_forward(&x, &f, a, b, &layout, RMS_EPS).expect("shapes fixed");
                o.data().iter().zip(up.data()).map(|(p, q)| p * q).sum()
            };
            let mut point = alpha.clone();
            point.extend_from_slice(&beta);
            let mut analytic = fused.d_alpha.clone();
            analytic.extend_from_slice(&fused.d_beta);
            let report = finite_difference_check_with(
                |p| loss(&p[..d], &p[d..]),
                &point,
                &analytic,
                4e-5,
                1e-6,
                Stencil::FourthOrder,
            )?;
            fd.record(report.max_rel_error);
        }
    }
    Ok(vec![forward.finish(), backward.finish(), fd.finish()])
}

fn clipping_row(rng: &mut Rng) -> Result<VerifyRow> {
    let mut row = Row::new("clipping_preserves_gmd_ratio", 1e-13);
    let config = ModelConfig {
        depth: 2,
        d_model: 8,
        ffn_dim: 12,
        heads: 2,
        head_dim: 4,
        grid_h: 2,
        grid_w: 2,
        text_tokens: 1,
        residual_mode: ResidualMode::Baseline,
        init_mode: InitMode::Standard,
        ..ModelConfig::default()
    };
    for _ in 0..100 {
        let mut grads = ModelParams::init(&config, rng.below(1 << 30) as u64)?;
        grads.scale(rng.uniform_range(0.1, 100.0));
        let writer_mean: Vec<[Matrix; 2]> = grads
            .blocks
            .iter()
            .map(|b| {
                [
                    rng.normal_matrix(b.w_o.rows(), b.w_o.cols(), 0.1),
                    rng.normal_matrix(b.w_2.rows(), b.w_2.cols(), 0.1),
                ]
            })
            .collect();
        let before = writer_modes(&grads, &writer_mean);
        let threshold = grads.global_norm() * rng.uniform_range(0.01, 0.9);
        let s = clip_global_norm(&mut grads, threshold)?;
        let scaled: Vec<[Matrix; 2]> = writer_mean.iter().map(|[a, b]| [a.scale(s), b.scale(s)]).collect();
        let after = writer_modes(&grads, &scaled);
        for (b, a) in before.iter().zip(&after) {
            let (rb, ra) = (b.g_mean / b.g_ctr, a.g_mean / a.g_ctr);
            row.record(rel((rb - ra).abs(), rb));
        }
    }
    Ok(row.finish())
}

/// Runs every identity row. `mutation` injects a fault for self-tests.
pub fn run_verify(seed: u64, mutation: Option<Mutation>) -> Result<VerifyReport> {
    let root = Rng::new(seed);
    let mut rows = gmd_rows(&mut root.substream(1), mutation)?;
    rows.extend(attention_rows(&mut root.substream(2))?);
    rows.extend(alignment_rows(&mut root.substream(3))?);
    rows.extend(merge_rows(&mut root.substream(4))?);
    rows.extend(fused_rows(&mut root.substream(5))?);
    rows.push(clipping_row(&mut root.substream(6))?);
    Ok(VerifyReport { seed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_defect_detects_rank_two() {
        let mut rng = Rng::new(1);
        let u = vector(&mut rng, 4, -1.0, 1.0);
        let v = vector(&mut rng, 3, -1.0, 1.0);
        let outer = Matrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        assert!(rank_one_defect(&outer) < 1e-15);
        assert!(rank_one_defect(&rng.normal_matrix(4, 3, 1.0)) > 1e-3);
        assert_eq!(rank_one_defect(&Matrix::zeros(2, 2)), 0.0);
    }

    #[test]
    fn gmd_sign_flip_is_caught_by_gmd_rows_only() {
        let mut rng = Rng::new(3);
        let rows = gmd_rows(&mut rng, Some(Mutation::GmdSignFlip)).unwrap();
        assert!(!rows[0].passed);
        assert!(rows[1].passed);
    }

    #[test]
    fn full_suite_passes_and_mutation_fails_one_row() {
        let report = run_verify(0, None).unwrap();
        assert!(report.all_passed(), "{report}");
        let mutated = run_verify(0, Some(Mutation::GmdSignFlip)).unwrap();
        assert_eq!(mutated.failed(), vec!["gmd_reconstruction"]);
    }
}
