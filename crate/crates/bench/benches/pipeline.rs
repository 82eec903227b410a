use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use touchpit::classify::svm;
use touchpit::experiments::{self, ExperimentSpec, Variant};
use touchpit::protocol::ProtocolConfig;
use touchpit::synthgen::{generate, SynthConfig};
use touchpit::{features, metrics, preprocess};

fn bench_eer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("eer");
    for n in [100usize, 1000, 10000] {
        let gen: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.3).collect();
        let imp: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| metrics::eer(black_box(&gen), black_box(&imp)).unwrap())
        });
    }
    g.finish();
}

fn bench_smo(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("smo_fit");
    for n in [100usize, 400] {
        let mut x = Array2::from_shape_simple_fn((n, 24), || rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        for (mut row, &l) in x.rows_mut().into_iter().zip(&y) {
            row[0] += 0.5 * l;
        }
        let p = svm::SvmParams::default();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| svm::fit(x.view(), &y, &p, false))
        });
    }
    g.finish();
}

fn bench_features(c: &mut Criterion) {
    let d = generate(&SynthConfig {
        n_users: 2,
        ..Default::default()
    })
    .unwrap();
    let strokes = preprocess::user_strokes(&d, d.users.keys().next().unwrap());
    c.bench_function("extract_sequence", |b| {
        b.iter(|| features::extract_sequence(black_box(&strokes)))
    });
}

fn bench_baseline(c: &mut Criterion) {
    let d = generate(&SynthConfig {
        n_users: 12,
        sessions_per_user: 3,
        strokes_per_session: 20,
        ..Default::default()
    })
    .unwrap();
    let spec = ExperimentSpec::new(Variant::Baseline, ProtocolConfig::default());
    let mut g = c.benchmark_group("experiment");
    g.sample_size(10);
    g.bench_function("baseline_12_users", |b| b.iter(|| experiments::run(&spec, &d).unwrap()));
    g.finish();
}

criterion_group!(benches, bench_eer, bench_smo, bench_features, bench_baseline);
criterion_main!(benches);
