//! Data-parallel core against the sequential fallback.
//!
//! The backend is chosen at compile time, so run the bench twice:
//!
//! ```text
//! cargo bench -p mavqa-core
//! cargo bench -p mavqa-core --no-default-features
//! ```
//!
//! Benchmark ids carry the backend name, so criterion keeps both sets of
//! results side by side under `target/criterion`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mavqa_core::config::RunConfig;
use mavqa_core::experiment::{eval_rng, run_ablation, ExperimentSpec};
use mavqa_core::model::{ModelShape, Models};
use mavqa_core::par;
use mavqa_core::train::{evaluate, Arm, TrainConfig};
use mavqa_core::world::{make_dataset, Scenario, Split};
use mavqa_core::Rng;

fn backend() -> &'static str {
    if par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

/// Chunked evaluation with recall and the full reverse chain.
fn bench_evaluate(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let data = make_dataset(2000, &cfg.world).unwrap();
    let train = TrainConfig { arm: Arm::Both, ..cfg.train.clone() };
    let models = Models::init(data.dims, train.shape, &mut Rng::new(1)).unwrap();
    let test = data.split(Split::Test);
    c.bench_with_input(BenchmarkId::new("evaluate_400", backend()), &test, |b, test| {
        b.iter(|| evaluate(&models, &train, test, Scenario::AudioMissing, 1.0, &mut eval_rng(0, Scenario::AudioMissing)).unwrap())
    });
}

/// A small ablation grid: independent training cells.
fn bench_grid(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.samples = 200;
    cfg.seeds = vec![0, 1];
    cfg.train.epochs = 1;
    cfg.train.shape = ModelShape {
        slots: 16,
        eps_hidden: 64,
        head_hidden: 32,
    };
    let spec = ExperimentSpec::ablation(cfg);
    let mut g = c.benchmark_group("ablation_grid");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("8_cells", backend()), |b| b.iter(|| run_ablation(&spec).unwrap()));
    g.finish();
}

criterion_group!(benches, bench_evaluate, bench_grid);
criterion_main!(benches);
