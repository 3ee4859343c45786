use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use phfit::cases;
use phfit::objective;
use phfit::optimizer::init_candidate;
use phfit::qbd::{self, QbdModel, DEFAULT_R_TOLERANCE};
use phfit::sampler;
use phfit::{Family, FitTarget, MarkovianPH, Structure};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn moments(c: &mut Criterion) {
    let mut g = c.benchmark_group("moments");
    for n in [5, 20, 50] {
        let ph = MarkovianPH::erlang(n, 2.0);
        g.bench_with_input(BenchmarkId::from_parameter(n), &ph, |b, ph| {
            b.iter(|| black_box(ph).moments(20).unwrap())
        });
    }
    g.finish();
}

fn structures() -> [(&'static str, Structure); 3] {
    [
        ("general-10", Structure::General { n: 10 }),
        ("coxian-20", Structure::Coxian { n: 20 }),
        (
            "hyper-erlang-20",
            Structure::HyperErlang {
                blocks: vec![3, 4, 6, 7],
            },
        ),
    ]
}

// One optimizer step's worth of work per candidate.
fn loss_and_gradient(c: &mut Criterion) {
    let target = FitTarget::from_moments(MarkovianPH::erlang(4, 4.0).moments(5).unwrap()).unwrap();
    let shaped = cases::shape::target(cases::shape::CDF_POINTS).unwrap();
    let mut g = c.benchmark_group("loss_and_gradient");
    for (name, s) in structures() {
        let flat = init_candidate(&s, 1, 0);
        let mut grad = vec![0.0; flat.len()];
        g.bench_function(format!("{name}/moments"), |b| {
            b.iter(|| objective::evaluate(&s, black_box(&flat), &target, Some(&mut grad)).unwrap())
        });
        g.bench_function(format!("{name}/cdf20"), |b| {
            b.iter(|| objective::evaluate(&s, black_box(&flat), &shaped, Some(&mut grad)).unwrap())
        });
    }
    g.finish();
}

fn cdf(c: &mut Criterion) {
    let ph = cases::shape::reference();
    c.bench_function("cdf/hyper-erlang-11", |b| b.iter(|| ph.cdf(black_box(1.3))));
}

fn queue(c: &mut Criterion) {
    let model = QbdModel::new(cases::queue::arrival(), cases::queue::service()).unwrap();
    let mut g = c.benchmark_group("qbd");
    g.sample_size(20);
    g.bench_function("solve", |b| {
        b.iter(|| qbd::solve(black_box(&model), DEFAULT_R_TOLERANCE).unwrap())
    });
    g.bench_function("pmf-200", |b| {
        b.iter(|| qbd::stationary_pmf(black_box(&model), cases::queue::K_MAX, DEFAULT_R_TOLERANCE).unwrap())
    });
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let mut g = c.benchmark_group("sample");
    for family in [Family::General, Family::Coxian, Family::HyperErlang] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        g.bench_function(format!("{family}-50"), |b| {
            b.iter(|| sampler::sample(family, 50, &mut rng))
        });
    }
    g.finish();
}

criterion_group!(benches, moments, loss_and_gradient, cdf, queue, sampling);
criterion_main!(benches);
