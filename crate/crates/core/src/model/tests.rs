use super::*;
use crate::numerics::{dot, finite_difference_check, rmsnorm_rows, rmsnorm_rows_backward, Rng, RMS_EPS};
use crate::subspace::{gmd_decompose, mean_over};

fn small_config(mode: ResidualMode, init: InitMode) -> ModelConfig {
    ModelConfig {
        depth: 2,
        d_model: 16,
        ffn_dim: 24,
        heads: 2,
        head_dim: 8,
        grid_h: 3,
        grid_w: 3,
        text_tokens: 3,
        channels: 3,
        residual_mode: mode,
        init_mode: init,
        rope_theta: 100.0,
        ..ModelConfig::default()
    }
}

fn random_input(config: &ModelConfig, rng: &mut Rng) -> ModelInput {
    let layout = config.layout();
    ModelInput {
        latents: rng.normal_matrix(layout.image_count, config.channels, 1.0),
        text: rng.normal_matrix(layout.text_count, config.d_model, 1.0),
    }
}

/// Random non-trivial gates so every merge term is exercised.
fn randomize_gates(params: &mut ModelParams, rng: &mut Rng) {
    for b in &mut params.blocks {
        for g in [&mut b.attn_gates, &mut b.ffn_gates] {
            match g {
                Gates::None => {}
                Gates::Scalar { lambda } | Gates::Channel { lambda } => {
                    *lambda = rng.uniform_matrix(lambda.rows(), lambda.cols(), 0.2, 1.0)
                }
                Gates::Split { alpha, beta } => {
                    *alpha = rng.uniform_matrix(1, alpha.cols(), 0.1, 0.9);
                    *beta = rng.uniform_matrix(1, beta.cols(), 0.5, 1.5);
                }
            }
        }
    }
}

fn random_model(mode: ResidualMode, seed: u64) -> Model {
    let config = small_config(mode, InitMode::Standard);
    let mut params = ModelParams::init(&config, seed).unwrap();
    let mut rng = Rng::new(seed + 100);
    for b in &mut params.blocks {
        b.w_o = rng.normal_matrix(16, 16, 0.3);
        b.w_2 = rng.normal_matrix(24, 16, 0.3);
    }
    params.w_out = rng.normal_matrix(16, 3, 0.3);
    randomize_gates(&mut params, &mut rng);
    Model::from_params(config, params).unwrap()
}

#[test]
fn every_parameter_family_matches_finite_differences() {
    for (i, mode) in ResidualMode::ALL.into_iter().enumerate() {
        let model = random_model(mode, 10 + i as u64);
        let mut rng = Rng::new(1);
        let input = random_input(&model.config, &mut rng);
        let proj = rng.normal_matrix(9, 3, 1.0);
        let (_, tape) = model.forward(&input).unwrap();
        let grads = model.backward(&tape, &proj).unwrap().grads;

        let analytic = grads.flatten();
        let base = model.params.flatten();
        let loss = |flat: &[f64]| {
            let mut p = model.params.clone();
            p.assign_flat(flat).unwrap();
            let m = Model::from_params(model.config.clone(), p).unwrap();
            dot(m.forward(&input).unwrap().0.data(), proj.data())
        };
        let mut offset = 0;
        for (info, m) in model.params.tensors() {
            let range = offset..offset + m.len();
            offset += m.len();
            let report = finite_difference_check(
                |x| {
                    let mut flat = base.clone();
                    flat[range.clone()].copy_from_slice(x);
                    loss(&flat)
                },
                &base[range.clone()],
                &analytic[range.clone()],
                1e-5,
                1e-5,
            )
            .unwrap();
            assert!(report.passed, "{mode:?} {} {:?}", info.name, report.max_rel_error);
        }
    }
}

#[test]
fn fused_and_composed_backward_agree_in_the_model() {
    let model = random_model(ResidualMode::Mvsplit, 3);
    let mut composed_cfg = model.config.clone();
    composed_cfg.fused_merge = false;
    let composed = Model::from_params(composed_cfg, model.params.clone()).unwrap();
    let mut rng = Rng::new(2);
    let input = random_input(&model.config, &mut rng);
    let dv = rng.normal_matrix(9, 3, 1.0);
    let (v1, t1) = model.forward(&input).unwrap();
    let (v2, t2) = composed.forward(&input).unwrap();
    assert!(v1.sub(&v2).max_abs() <= 1e-12);
    let g1 = model.backward(&t1, &dv).unwrap().grads.flatten();
    let g2 = composed.backward(&t2, &dv).unwrap().grads.flatten();
    let worst = g1.iter().zip(&g2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-11, "{worst}");
}

#[test]
fn zero_writer_forward_is_norm_chain() {
    for mode in ResidualMode::ALL {
        let config = small_config(mode, InitMode::ZeroWriter);
        let model = Model::new(config.clone(), 5).unwrap();
        let mut rng = Rng::new(6);
        let input = random_input(&config, &mut rng);
        let (_, tape) = model.forward(&input).unwrap();
        let segs = config.layout().segments();
        let mut x = tape.x0.clone();
        for b in &tape.blocks {
            assert_eq!(b.attn_merge.branch.max_abs(), 0.0);
            assert_eq!(b.ffn_merge.branch.max_abs(), 0.0);
            // With f = 0 each merge reduces to a fixed linear map of x.
            for (kind, gates) in [
                (config.residual_mode.merges().0, &model.params.blocks[0].attn_gates),
                (config.residual_mode.merges().1, &model.params.blocks[0].ffn_gates),
            ] {
                let z = match (kind, gates) {
                    (MergeKind::HardCentering, _) => crate::subspace::centered_over(&x, &segs),
                    (MergeKind::Mvsplit, Gates::Split { alpha, .. }) => {
                        let keep: Vec<f64> = alpha.data().iter().map(|a| 1.0 - a).collect();
                        let mean = mean_over(&x, &segs);
                        x.sub(&mean).add(&crate::subspace::scale_features(&mean, &keep))
                    }
                    _ => x.clone(),
                };
                x = rmsnorm_rows(&z, RMS_EPS).0;
            }
            assert!(b.output().sub(&x).max_abs() <= 1e-14);
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let model = random_model(ResidualMode::Mvsplit, 7);
    let mut rng = Rng::new(3);
    let input = random_input(&model.config, &mut rng);
    let (_, tape) = model.forward(&input).unwrap();
    let back = model.backward(&tape, &Matrix::zeros(9, 3)).unwrap();
    assert_eq!(back.grads.global_norm(), 0.0);
    assert_eq!(back.d_x0.max_abs(), 0.0);
}

#[test]
fn tape_replay_is_bit_identical() {
    for mode in ResidualMode::ALL {
        let model = random_model(mode, 8);
        let mut rng = Rng::new(4);
        let (_, tape) = model.forward(&random_input(&model.config, &mut rng)).unwrap();
        for (b, params) in tape.blocks.iter().zip(&model.params.blocks) {
            let (out, _) = block_forward(&b.x, params, &model.config, model.rope()).unwrap();
            assert_eq!(out, *b.output());
        }
    }
}

#[test]
fn mean_path_dynamics_decouple_exactly() {
    let model = random_model(ResidualMode::Mvsplit, 9);
    let segs = model.config.layout().segments();
    let mut rng = Rng::new(5);
    let (_, tape) = model.forward(&random_input(&model.config, &mut rng)).unwrap();
    for (b, params) in tape.blocks.iter().zip(&model.params.blocks) {
        for (x, sub, gates) in [
            (&b.x, &b.attn_merge, &params.attn_gates),
            (b.mid(), &b.ffn_merge, &params.ffn_gates),
        ] {
            let Gates::Split { alpha, beta } = gates else {
                unreachable!()
            };
            let z = sub.pre_norm(x, gates, &model.config).unwrap();
            let keep: Vec<f64> = alpha.data().iter().map(|a| 1.0 - a).collect();
            let jz = mean_over(&z, &segs);
            let expected = crate::subspace::scale_features(&mean_over(x, &segs), &keep).add(
                &crate::subspace::scale_features(&mean_over(&sub.branch, &segs), alpha.data()),
            );
            assert!(jz.sub(&expected).max_abs() <= 1e-12);
            let pz = z.sub(&jz);
            let px = x.sub(&mean_over(x, &segs));
            let pf = sub.branch.sub(&mean_over(&sub.branch, &segs));
            let expected = px.add(&crate::subspace::scale_features(&pf, beta.data()));
            assert!(pz.sub(&expected).max_abs() <= 1e-12);
        }
    }
}

#[test]
fn branch_adjoint_mean_is_alpha_scaled() {
    let mut model = random_model(ResidualMode::Mvsplit, 11);
    model.config.fused_merge = false;
    let segs = model.config.layout().segments();
    let mut rng = Rng::new(6);
    let (_, tape) = model.forward(&random_input(&model.config, &mut rng)).unwrap();
    let up = rng.normal_matrix(12, 16, 1.0);
    let b = &tape.blocks[0];
    let params = &model.params.blocks[0];
    let back = block_backward(b, params, &model.config, model.rope(), &up).unwrap();
    let MergeTape::Composed { z, inv_rms } = &b.attn_merge.merge else {
        unreachable!()
    };
    let g = rmsnorm_rows_backward(z, inv_rms, &back.d_mid);
    let Gates::Split { alpha, .. } = &params.attn_gates else {
        unreachable!()
    };
    let lhs = mean_over(&back.taps.attn.delta, &segs);
    let rhs = crate::subspace::scale_features(&mean_over(&g, &segs), alpha.data());
    assert!(lhs.sub(&rhs).max_abs() <= 1e-12);
}

#[test]
fn writer_taps_reproduce_writer_gradients() {
    let model = random_model(ResidualMode::Layerscale, 12);
    let mut rng = Rng::new(7);
    let input = random_input(&model.config, &mut rng);
    let (_, tape) = model.forward(&input).unwrap();
    let back = model.backward(&tape, &rng.normal_matrix(9, 3, 1.0)).unwrap();
    for (taps, g) in back.taps.iter().zip(&back.grads.blocks) {
        let wo = taps.attn.y.t_mul(&taps.attn.delta);
        assert!(wo.sub(&g.w_o).max_abs() <= 1e-13);
        let w2 = taps.ffn.y.t_mul(&taps.ffn.delta);
        assert!(w2.sub(&g.w_2).max_abs() <= 1e-13);
    }
}

#[test]
fn scalar_gate_leaves_mode_ratio_invariant() {
    let model = random_model(ResidualMode::Rezero, 13);
    let mut rng = Rng::new(8);
    let (_, tape) = model.forward(&random_input(&model.config, &mut rng)).unwrap();
    let back = model.backward(&tape, &rng.normal_matrix(9, 3, 1.0)).unwrap();
    for taps in &back.taps {
        let plain = gmd_decompose(&taps.attn.y, &taps.attn.delta).unwrap();
        let gated = gmd_decompose(&taps.attn.y, &taps.attn.delta.scale(0.037)).unwrap();
        assert!((plain.ratio() - gated.ratio()).abs() <= 1e-12 * plain.ratio().max(1.0));
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let model = random_model(ResidualMode::Baseline, 14);
    let mut rng = Rng::new(9);
    let (_, tape) = model.forward(&random_input(&model.config, &mut rng)).unwrap();
    for b in &tape.blocks {
        for a in &b.attn.attn {
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn rejects_bad_shapes() {
    let model = random_model(ResidualMode::Baseline, 15);
    let bad = ModelInput {
        latents: Matrix::zeros(8, 3),
        text: Matrix::zeros(3, 16),
    };
    assert!(model.forward(&bad).is_err());
    let mut params = model.params.clone();
    params.blocks[0].attn_gates = Gates::Split {
        alpha: Matrix::zeros(1, 16),
        beta: Matrix::zeros(1, 16),
    };
    assert!(matches!(
        Model::from_params(model.config.clone(), params),
        Err(Error::GateMismatch(_))
    ));
}
