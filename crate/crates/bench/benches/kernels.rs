use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use mvlab_bench::{desk_block, merge_case};
use mvlab_core::diagnostics::mu_eff;
use mvlab_core::fusedmerge::{fused_merge_backward, fused_merge_forward};
use mvlab_core::model::{block_backward, block_forward, residual_merge, residual_merge_backward, Gates, MergeKind};
use mvlab_core::numerics::{row_softmax, RMS_EPS};
use mvlab_core::{Matrix, Model, ResidualMode, Rng};

fn merges(c: &mut Criterion) {
    let mut group = c.benchmark_group("mvsplit_merge");
    for width in [64, 256] {
        let case = merge_case(64, 8, width, 1);
        let gates = Gates::Split {
            alpha: Matrix::row_vector(&case.alpha),
            beta: Matrix::row_vector(&case.beta),
        };
        group.bench_with_input(BenchmarkId::new("composed", width), &case, |b, case| {
            b.iter(|| {
                let out = residual_merge(&case.x, &case.f, &gates, MergeKind::Mvsplit, &case.layout).unwrap();
                residual_merge_backward(
                    &case.x,
                    &case.f,
                    &out,
                    &gates,
                    MergeKind::Mvsplit,
                    &case.layout,
                    &case.up,
                )
                .unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("fused", width), &case, |b, case| {
            b.iter(|| {
                let (_, cache) =
                    fused_merge_forward(&case.x, &case.f, &case.alpha, &case.beta, &case.layout, RMS_EPS).unwrap();
                fused_merge_backward(&cache, &case.up).unwrap()
            })
        });
    }
    group.finish();
}

fn blocks(c: &mut Criterion) {
    let mut group = c.benchmark_group("block");
    for (name, mode, fused) in [
        ("baseline", ResidualMode::Baseline, false),
        ("mvsplit_composed", ResidualMode::Mvsplit, false),
        ("mvsplit_fused", ResidualMode::Mvsplit, true),
    ] {
        let config = desk_block(mode, fused);
        let model = Model::new(config.clone(), 3).unwrap();
        let mut rng = Rng::new(4);
        let x = rng.normal_matrix(config.layout().total(), config.d_model, 1.0);
        let params = &model.params.blocks[0];
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| block_forward(black_box(&x), params, &config, model.rope()).unwrap())
        });
        let (out, tape) = block_forward(&x, params, &config, model.rope()).unwrap();
        let up = rng.normal_matrix(out.rows(), out.cols(), 1.0);
        group.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| block_backward(&tape, params, &config, model.rope(), black_box(&up)).unwrap())
        });
    }
    group.finish();
}

fn spectral(c: &mut Criterion) {
    let mut rng = Rng::new(5);
    let a = row_softmax(&rng.normal_matrix(72, 72, 2.0));
    c.bench_function("mu_eff_72", |b| {
        b.iter(|| {
            let mut r = Rng::new(6);
            mu_eff(black_box(&a), 200, 1e-10, &mut r).unwrap()
        })
    });
}

criterion_group!(benches, merges, blocks, spectral);
criterion_main!(benches);
