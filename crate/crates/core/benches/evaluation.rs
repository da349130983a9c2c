use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use grfu::model::{CellKind, Head, ModelParams, ModelSpec};
use grfu::par::Parallelism;
use grfu::synthdata::{generate, ScenarioSpec, TEST_SPLIT_OFFSET};
use grfu::train::{evaluate, model_grad_check, Batch};

const MODES: [(&str, Parallelism); 2] = [
    ("parallel", Parallelism::Auto),
    ("sequential", Parallelism::Sequential),
];

fn bench_evaluate(c: &mut Criterion) {
    let scenario = ScenarioSpec::classification(0);
    let data = generate(&scenario.split(TEST_SPLIT_OFFSET, 64), Parallelism::Auto).unwrap();
    let spec = ModelSpec::new(
        CellKind::Lgrf,
        data.spec.sensor_dims.clone(),
        Head::Classifier { classes: data.spec.classes },
    );
    let params = ModelParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| evaluate(&spec, &params, &data, mode).unwrap())
        });
    }
    group.finish();
}

fn bench_gradcheck(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut spec = ModelSpec::new(CellKind::Lgrf, vec![6, 3, 4], Head::Regressor { outputs: 1 });
    spec.d_e = 4;
    spec.d_h = 5;
    let params = ModelParams::random(&spec, 1.0, &mut rng).unwrap();
    let batch = Batch::random(&spec, 2, 3, &mut rng);

    let mut group = c.benchmark_group("gradcheck");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| model_grad_check(&spec, &params, &batch, 1e-5, None, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate, bench_gradcheck);
criterion_main!(benches);
