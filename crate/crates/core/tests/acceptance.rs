//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed. The
//! collapse comparison uses a shortened horizon unless
//! `MVLAB_ACCEPTANCE_FULL=1` is set; its full protocol takes over an hour on
//! one core.

mod support;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use mvlab_core::audit::{audit_model, AuditBatch};
use mvlab_core::diagnostics::mu_eff;
use mvlab_core::model::{Family, InitMode, ModelConfig, ResidualMode};
use mvlab_core::numerics::row_softmax;
use mvlab_core::probe::{ridge_fit, GroupSplit};
use mvlab_core::trainer::{
    compute_gradients, make_batch, run_experiment, run_preset, Preset, RectifiedFlowBatch, SyntheticDataset,
    TrainConfig, Trainer, LOSS_FILE, SNAPSHOT_CSV_FILE, SNAPSHOT_JSONL_FILE,
};
use mvlab_core::verify::{run_verify, Mutation};
use mvlab_core::{Model, Rng};

struct Verdict {
    passed: bool,
    /// Soft criteria are reported but do not fail the suite.
    soft: bool,
    detail: String,
}

fn hard(passed: bool, detail: String) -> Verdict {
    Verdict {
        passed,
        soft: false,
        detail,
    }
}

fn identities() -> Verdict {
    let start = Instant::now();
    let report = run_verify(0, None).expect("verify runs");
    let elapsed = start.elapsed().as_secs_f64();
    let mutated = run_verify(0, Some(Mutation::GmdSignFlip)).expect("verify runs");
    let caught = mutated.failed() == ["gmd_reconstruction"];
    let worst = report
        .rows
        .iter()
        .max_by(|a, b| (a.max_error / a.tolerance.max(1e-300)).total_cmp(&(b.max_error / b.tolerance.max(1e-300))))
        .map(|r| format!("{} at {:.2e} of {:.0e}", r.name, r.max_error, r.tolerance))
        .unwrap_or_default();
    hard(
        report.all_passed() && caught && elapsed < 300.0,
        format!(
            "{} rows, failed {:?}, tightest {worst}, sign-flip caught only by GMD row: {caught}, {elapsed:.1}s",
            report.rows.len(),
            report.failed()
        ),
    )
}

fn tiny_model(mode: ResidualMode) -> ModelConfig {
    ModelConfig {
        depth: 2,
        d_model: 16,
        ffn_dim: 24,
        heads: 2,
        head_dim: 8,
        grid_h: 3,
        grid_w: 3,
        text_tokens: 2,
        channels: 2,
        residual_mode: mode,
        init_mode: InitMode::Standard,
        alpha_init: 0.3,
        beta_init: 0.8,
        lambda_init: 0.5,
        ..ModelConfig::default()
    }
}

/// Batch-mean flow-matching loss from the forward pass alone.
fn batch_loss(model: &Model, batch: &RectifiedFlowBatch) -> f64 {
    let img = model.config.layout().image_count;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let (v, _) = model.forward(&batch.input(i)).expect("finite forward");
        total += v.sub(&batch.target[i]).frobenius_sq() / (img * model.config.channels) as f64;
    }
    total / batch.len() as f64
}

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut checked = 0;
    let modes = [
        (ResidualMode::Baseline, false),
        (ResidualMode::Layerscale, false),
        (ResidualMode::Rezero, false),
        (ResidualMode::Mvsplit, false),
        (ResidualMode::Mvsplit, true),
        (ResidualMode::MvsplitAttnOnly, false),
        (ResidualMode::HardCentering, false),
    ];
    for (k, (mode, fused)) in modes.into_iter().enumerate() {
        let config = ModelConfig {
            fused_merge: fused,
            ..tiny_model(mode)
        };
        let model = Model::new(config.clone(), 11 + k as u64).unwrap();
        let dataset = SyntheticDataset::new(3, 3, &config).unwrap();
        let batch = make_batch(&dataset, 2, None, &mut Rng::new(k as u64));
        let pass = compute_gradients(&model, &batch, 1, 0).unwrap();
        let analytic = pass.grads.flatten();
        let base = model.params.flatten();
        let families: Vec<Family> = model
            .params
            .tensors()
            .iter()
            .flat_map(|(info, m)| std::iter::repeat_n(info.family, m.len()))
            .collect();
        let mut probe = model.params.clone();
        let mut eval = |values: &[f64]| {
            probe.assign_flat(values).unwrap();
            let m = Model::from_params(config.clone(), probe.clone()).unwrap();
            batch_loss(&m, &batch)
        };
        assert!(
            (eval(&base) - pass.loss).abs() <= 1e-12 * pass.loss,
            "loss routes disagree"
        );
        let h = 1e-4;
        let mut numeric = vec![0.0; base.len()];
        let mut point = base.clone();
        for i in 0..base.len() {
            let mut at = |d: f64| {
                point[i] = base[i] + d;
                let v = eval(&point);
                point[i] = base[i];
                v
            };
            numeric[i] = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        }
        let mut scale: BTreeMap<Family, f64> = BTreeMap::new();
        for (f, a) in families.iter().zip(&analytic) {
            let s = scale.entry(*f).or_insert(0.0);
            *s = s.max(a.abs());
        }
        for ((f, a), n) in families.iter().zip(&analytic).zip(&numeric) {
            let floor = 1e-3 * scale[f] + 1e-12;
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            let e = worst.entry(f.label()).or_insert(0.0);
            *e = e.max(err);
            checked += 1;
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    let per: Vec<String> = worst.iter().map(|(f, e)| format!("{f} {e:.1e}")).collect();
    hard(
        max <= 1e-5 && worst.len() == 7 && elapsed < 600.0,
        format!(
            "{checked} entries over 7 merge variants, max rel error {max:.2e} ({}), {elapsed:.1}s",
            per.join(", ")
        ),
    )
}

fn collapse_reproduction() -> Verdict {
    let full = std::env::var("MVLAB_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let base = TrainConfig::from_toml(include_str!("../../../configs/collapse32.toml")).unwrap();
    let (seeds, steps): (Vec<u64>, usize) = if full {
        (vec![0, 1, 2], base.steps)
    } else {
        (vec![0], 200)
    };
    let keep = std::env::var_os("MVLAB_COLLAPSE_OUT");
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.as_deref().map(Path::new).unwrap_or(tmp.path()).to_path_buf();
    let mut good = 0;
    let mut notes = Vec::new();
    for &seed in &seeds {
        let config = TrainConfig {
            seed,
            steps,
            ..base.clone()
        };
        let run = |preset: Preset| {
            let dir = root.join(format!("{}-s{seed}", preset.name()));
            run_preset(preset, &config, &dir, &mut |_, _| {}).unwrap().remove(0).1
        };
        let b = run(Preset::StandardInitFront);
        let m = run(Preset::Mvsplit);
        let peak = b.snapshots.iter().map(|d| d.deep_tcs).fold(0.0, f64::max);
        let peak_ratio = b.snapshots.iter().map(|d| d.deep_gmd_ratio).fold(0.0, f64::max);
        let baseline_collapses = b.collapse_step.is_some();
        let mv_trends_down = m.loss_slope_late < 0.0 && m.loss_last_window < m.loss_first_window;
        let mv_stable = m.max_tcs < 0.9 && mv_trends_down;
        good += usize::from(baseline_collapses && mv_stable);
        notes.push(format!(
            "seed {seed}: baseline deep TCS peak {peak:.3}, GMD ratio peak {peak_ratio:.2}, collapse {:?}; \
             MV-Split max TCS {:.3}, loss {:.3}->{:.3}",
            b.collapse_step, m.max_tcs, m.loss_first_window, m.loss_last_window
        ));
    }
    let needed = if full { 2 } else { 1 };
    Verdict {
        passed: good >= needed,
        soft: true,
        detail: format!(
            "{} horizon {steps} steps x {} seed(s), {good} seed(s) show both signatures; {}",
            if full { "full" } else { "shortened" },
            seeds.len(),
            notes.join("; ")
        ),
    }
}

fn spectral_oracle() -> Verdict {
    let mut rng = Rng::new(21);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let scale = [0.1, 1.0, 4.0][k % 3];
        let a = row_softmax(&rng.normal_matrix(8, 8, scale));
        let oracle = support::centered_spectral_norm(&a);
        let est = mu_eff(&a, 200_000, 1e-15, &mut rng).unwrap();
        worst = worst.max((est.value - oracle).abs());
    }
    hard(
        worst <= 1e-8,
        format!("100 row-stochastic 8x8 cases, max |estimate - oracle| {worst:.2e}"),
    )
}

fn audit_figure() -> Verdict {
    let model_config = ModelConfig {
        depth: 4,
        d_model: 32,
        ffn_dim: 64,
        heads: 2,
        head_dim: 16,
        grid_h: 4,
        grid_w: 4,
        text_tokens: 4,
        channels: 4,
        residual_mode: ResidualMode::Baseline,
        init_mode: InitMode::Standard,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        model: model_config,
        steps: 30,
        batch: 8,
        shards: 2,
        warmup_steps: 5,
        snapshot_every: 0,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config).unwrap();
    for _ in 0..30 {
        trainer.step(false).unwrap();
    }
    let homog = audit_model(&trainer.model, trainer.dataset(), AuditBatch::Homogenized, 4, 1).unwrap();
    let ortho = audit_model(&trainer.model, trainer.dataset(), AuditBatch::Orthogonalized, 4, 1).unwrap();
    let gap = homog
        .iter()
        .map(|p| (p.excess_amplification - p.envelope).abs() / p.envelope)
        .fold(0.0, f64::max);
    let writers: std::collections::BTreeSet<_> = homog.iter().map(|p| format!("{:?}", p.writer)).collect();
    let excess = ortho.iter().map(|p| p.excess_amplification.abs()).fold(0.0, f64::max);
    hard(
        gap <= 0.05 && excess < 0.1 && writers.len() == 2,
        format!(
            "homogenized: {} points, max gap to envelope {:.2e}; orthogonalized: max |A-1| {excess:.2e}",
            homog.len(),
            gap
        ),
    )
}

fn determinism() -> Verdict {
    let config = TrainConfig {
        model: ModelConfig {
            residual_mode: ResidualMode::Mvsplit,
            init_mode: InitMode::ZeroWriter,
            ..tiny_model(ResidualMode::Mvsplit)
        },
        steps: 20,
        batch: 8,
        shards: 4,
        warmup_steps: 4,
        snapshot_every: 5,
        seed: 9,
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_experiment(&config, &a, "a", &mut |_| {}).unwrap();
    run_experiment(&config, &b, "b", &mut |_| {}).unwrap();
    let same: Vec<bool> = [LOSS_FILE, SNAPSHOT_CSV_FILE, SNAPSHOT_JSONL_FILE]
        .iter()
        .map(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
        .collect();
    hard(
        same.iter().all(|&s| s),
        format!("loss series, snapshot CSV and snapshot JSONL byte-identical: {same:?}"),
    )
}

fn probe_consistency() -> Verdict {
    let mut rng = Rng::new(31);
    let n = 2000;
    let k = 5;
    let x = rng.normal_matrix(n, k, 1.0);
    let w: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
    let y: Vec<f64> = (0..n)
        .map(|r| 0.7 + (0..k).map(|c| x[(r, c)] * w[c]).sum::<f64>())
        .collect();
    let groups: Vec<usize> = (0..n).map(|i| i / 4).collect();
    let split = GroupSplit::new(&groups, 0.25, &mut rng).unwrap();
    let disjoint = split.is_group_disjoint(&groups) && {
        let train: std::collections::HashSet<usize> = split.train.iter().map(|&i| groups[i]).collect();
        split.test.iter().all(|&i| !train.contains(&groups[i]))
    };
    let fit = ridge_fit(&x, &y, 0.0, &split).unwrap();
    let rows: Vec<Vec<f64>> = split.train.iter().map(|&i| x.row(i).to_vec()).collect();
    let targets: Vec<f64> = split.train.iter().map(|&i| y[i]).collect();
    let ols = support::ols(&rows, &targets);
    let agree = split
        .test
        .iter()
        .map(|&i| {
            let o = ols[0] + x.row(i).iter().zip(&ols[1..]).map(|(a, b)| a * b).sum::<f64>();
            (fit.predict(x.row(i)) - o).abs()
        })
        .fold(0.0, f64::max);
    let mut shuffled = y.clone();
    rng.shuffle(&mut shuffled);
    let noise = ridge_fit(&x, &shuffled, 1e-3, &split).unwrap();
    hard(
        (1.0 - fit.r2).abs() <= 1e-10 && noise.r2 < 0.1 && disjoint && agree < 1e-9,
        format!(
            "exact-linear R2 = 1 - {:.1e}, shuffled R2 {:.3}, group-disjoint {disjoint}, \
             max |ridge - OLS oracle| {agree:.1e}",
            1.0 - fit.r2,
            noise.r2
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 7] = [
        ("exact-identity suite", identities),
        ("gradient integrity vs finite differences", gradient_integrity),
        ("collapse reproduction", collapse_reproduction),
        ("centered spectral norm oracle", spectral_oracle),
        ("audit envelope analog", audit_figure),
        ("seeded determinism", determinism),
        ("probe self-consistency", probe_consistency),
    ];
    let mut hard_failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        let status = match (v.passed, v.soft) {
            (true, _) => "PASS",
            (false, true) => "FAIL (soft)",
            (false, false) => "FAIL",
        };
        println!("criterion {} {name}: {status}: {}", i + 1, v.detail);
        if !v.passed && !v.soft {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} hard criteria failed");
        std::process::exit(1);
    }
}
