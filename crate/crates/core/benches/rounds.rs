use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fedimpres::config::ExperimentConfig;
use fedimpres::engine::Federation;
use fedimpres::par;

fn config(parallel: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(
        "algorithm = fedimpres\nrounds = 1\nwarmup_rounds = 0\nlocal_epochs = 2\n\
         toy_per_class = 100\nn_clients = 8\nsynth_batch_size = 16\nhidden = 64\n",
    )
    .unwrap();
    cfg.round.parallel = parallel;
    cfg
}

fn round(c: &mut Criterion) {
    let mut group = c.benchmark_group("round");
    group.sample_size(10);
    for (name, parallel) in [("sequential", false), ("parallel", true)] {
        let cfg = config(parallel);
        let setup = cfg.prepare().unwrap();
        let mut fed = Federation::new(
            cfg.round.clone(),
            &setup.train,
            &setup.shards,
            setup.test.clone(),
            setup.pool.clone(),
            &setup.model,
        )
        .unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fed.run_round(&setup.model, 0).unwrap())
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let cfg = config(true);
    let setup = cfg.prepare().unwrap();
    let model = &setup.model;
    let x = setup.train.images.select_rows(&(0..64).collect::<Vec<_>>());
    let y = setup.train.labels[..64].to_vec();
    let mut group = c.benchmark_group("gradient_sweep");
    for (name, parallel) in [("sequential", false), ("parallel", true)] {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::map_range(256, parallel, |_| model.backward(&x, &y).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, round, sweep);
criterion_main!(benches);
