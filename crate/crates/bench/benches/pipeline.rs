use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use panel_dml::{estimate_requests, CrossFitConfig, EstimandRequest, Preset};
use panel_dml_bench::panel;

fn pipeline(c: &mut Criterion) {
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    for n in [500, 2500] {
        let p = panel(n, 5);
        let cfg = CrossFitConfig::default();
        let partition = cfg.partition(n).unwrap();
        let requests = [EstimandRequest::Effect { t: 10, s: 0 }];
        for preset in [Preset::Dpgmm, Preset::Gmm] {
            let est = [(preset.name().to_string(), preset.spec())];
            group.bench_function(format!("{}_n{n}", preset.name()), |b| {
                b.iter(|| {
                    estimate_requests(black_box(&p), &partition, &requests, &est, &cfg).unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
