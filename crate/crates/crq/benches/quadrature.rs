use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crq::exec::ExecMode;
use crq::homotopy::{extend, r_r_eps, residual_test_form, residual_test_points, ExtensionRule};
use crq::model::ManifoldModel;
use crq::quadrature::{GridMode, QuadratureGrid};

fn r1_at_one_point(c: &mut Criterion) {
    let model = ManifoldModel::bundled("sig22_n5").unwrap();
    let (f, support) = residual_test_form(&model);
    let g = extend(&f, ExtensionRule::GraphConstant);
    let (zp, s) = residual_test_points(&model).swap_remove(0);
    let mut group = c.benchmark_group("r1_quadrature");
    group.sample_size(10);
    for budget in [10_000usize, 40_000] {
        let grid = QuadratureGrid::build(&model, support.clone(), &zp, &s, 0.05, budget, GridMode::MonteCarlo, 1).unwrap();
        for (label, mode) in [("parallel", ExecMode::Parallel), ("sequential", ExecMode::Sequential)] {
            group.bench_with_input(BenchmarkId::new(label, budget), &grid, |b, grid| {
                b.iter(|| r_r_eps(&model, &g, &zp, &s, grid, mode).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, r1_at_one_point);
criterion_main!(benches);
