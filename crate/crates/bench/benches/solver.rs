use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use panel_dml::solver::{penalty_grid, solve_path, solve_penalized_gmm, QuadraticForm};
use panel_dml::{RieszSpec, SolverOptions};
use panel_dml_bench::{design, panel, riesz_system, v_rows};

fn solver(c: &mut Criterion) {
    let sys = riesz_system(&panel(2500, 5));
    let opts = SolverOptions::default();
    let r_max = sys.quadratic().max_penalty();
    let mut group = c.benchmark_group("riesz_solver");
    group.sample_size(10);
    group.bench_function("single_penalty", |b| {
        b.iter(|| solve_penalized_gmm(black_box(&sys), 1e-2 * r_max, None, &opts).unwrap())
    });
    let grid = penalty_grid(r_max, 50, 1e-4);
    group.bench_function("path_50", |b| {
        b.iter(|| solve_path(black_box(&sys), &grid, &opts).unwrap())
    });
    group.finish();
}

fn dictionaries(c: &mut Criterion) {
    let p = panel(2500, 5);
    let (design, _) = design(&p);
    let (_, d) = RieszSpec::standard().dictionaries(&design).unwrap();
    let d = panel_dml::features::fit_standardization(d, design.v_now.values.view()).unwrap();
    let rows = v_rows(&design);
    let mut group = c.benchmark_group("dictionary");
    group.bench_function("eval_full_cubic", |b| {
        b.iter(|| d.eval_rows(black_box(rows.view())).unwrap())
    });
    group.bench_function("derivative_full_cubic", |b| {
        b.iter(|| {
            d.eval_derivative_rows(black_box(rows.view()), &design.target)
                .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, solver, dictionaries);
criterion_main!(benches);
