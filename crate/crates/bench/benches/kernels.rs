use std::hint::black_box;

use cdekf_bench::{factor, pre_array};
use cdekf_core::filters::{generate_sample_points, mu_conventional, mu_sr_block_qr, mu_sr_two_qr};
use cdekf_core::linalg::{cholesky_lower, triangularize_lower};
use cdekf_core::*;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn linalg(c: &mut Criterion) {
    let mut g = c.benchmark_group("triangularize");
    for n in [3, 6, 12] {
        let pre = pre_array(n, 2 * n + 1);
        g.bench_with_input(BenchmarkId::from_parameter(n), &pre, |b, pre| b.iter(|| triangularize_lower(black_box(pre))));
    }
    g.finish();
    let p = factor(6).gram();
    c.bench_function("cholesky/6", |b| b.iter(|| cholesky_lower(black_box(&p))));
}

fn updates(c: &mut Criterion) {
    let model = CstrModel::new();
    let s = factor(3);
    let mean = model.x0_mean().to_vec();
    let points = generate_sample_points(&mean, &s, 1e3);
    let z = [model.measurement(1, &mean)[0] + 0.2];
    let full = GaussianBelief { time: 1.0, mean: mean.clone(), cov: Covariance::Full(s.gram()) };
    let fac = GaussianBelief { time: 1.0, mean, cov: Covariance::Factor(s) };
    let mut g = c.benchmark_group("update");
    g.bench_function("conventional", |b| b.iter(|| mu_conventional(&full, &points, 1, black_box(&z), &model)));
    g.bench_function("two-qr", |b| b.iter(|| mu_sr_two_qr(&fac, &points, 1, black_box(&z), &model)));
    g.bench_function("block-qr", |b| b.iter(|| mu_sr_block_qr(&fac, &points, 1, black_box(&z), &model)));
    g.finish();
}

fn predictions(c: &mut Criterion) {
    let model = CstrModel::new();
    let opts = OdeOptions::default();
    let mut g = c.benchmark_group("cstr-predict-1s");
    for variant in FilterVariant::ALL {
        let belief = GaussianBelief::initial(variant, &model).unwrap();
        g.bench_function(variant.id(), |b| b.iter(|| predict(variant, black_box(&belief), 1.0, &model, 1e3, &opts)));
    }
    g.finish();

    let vdp = VanDerPolModel::new(1e3).unwrap();
    let stiff = OdeOptions::with_tolerance(1e-4, OdeMethod::StiffImplicit);
    let belief = GaussianBelief::initial(FilterVariant::SrSpdeBlockQr, &vdp).unwrap();
    c.bench_function("vdp-1e3-predict-0.2s/sr-spde-b", |b| {
        b.iter(|| predict(FilterVariant::SrSpdeBlockQr, black_box(&belief), 0.2, &vdp, 1e3, &stiff))
    });
}

criterion_group!(benches, linalg, updates, predictions);
criterion_main!(benches);
