//! Sequential vs parallel execution at the two granularities that fan out:
//! sweep cells and intervention seeds. `jobs = 1` forces the sequential
//! path even in parallel builds, so the comparison runs inside one binary;
//! built with `--no-default-features` both arms are sequential and should
//! tie. On a single-core host parity is the expected outcome everywhere.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use crbm_core::intervene::{run_intervention, DonorConcepts, InterventionKind};
use crbm_core::model::{train, Arch, Method, Model, TrainConfig};
use crbm_core::par::map_jobs;
use crbm_core::synth::{generate, Dataset, TaskSpec};

fn spec() -> TaskSpec {
    TaskSpec {
        n_train: 600,
        n_val: 100,
        n_test: 400,
        d: 10,
        seed: 3,
        ..TaskSpec::complete(3, 4)
    }
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch: 64,
        seed,
        ..TrainConfig::default()
    }
}

fn train_one(ds: &Dataset, seed: u64) -> Model {
    let arch = Arch {
        input_dim: 10,
        hidden: vec![16],
        concept_dim: 3,
        residual_dim: 4,
        task_hidden: vec![8],
        n_classes: 4,
    };
    let cfg = train_cfg(seed);
    let mut model = Model::new(arch, Method::Latent, &cfg).unwrap();
    train(&mut model, ds, &cfg).unwrap();
    model
}

fn bench_sweep_cells(c: &mut Criterion) {
    let ds = generate(&spec()).unwrap();
    let mut group = c.benchmark_group("sweep_cells");
    group.sample_size(10);
    for (name, jobs) in [("seq", 1usize), ("par", 0usize)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &jobs, |b, &jobs| {
            b.iter(|| {
                let accs = map_jobs((0..4u64).collect(), jobs, |seed| {
                    let model = train_one(&ds, seed);
                    model
                        .split_accuracy(
                            &ds,
                            crbm_core::synth::Split::Test,
                            crbm_core::model::EvalSource::PredictedHard,
                        )
                        .unwrap()
                });
                assert_eq!(accs.len(), 4);
                accs
            })
        });
    }
    group.finish();
}

fn bench_intervention_seeds(c: &mut Criterion) {
    let ds = generate(&spec()).unwrap();
    let model = train_one(&ds, 0);
    let mut group = c.benchmark_group("intervention_seeds");
    group.sample_size(10);
    for (name, jobs) in [("seq", 1usize), ("par", 0usize)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &jobs, |b, &jobs| {
            b.iter(|| {
                let accs = map_jobs((0..8u64).collect(), jobs, |seed| {
                    run_intervention(
                        &model,
                        &ds,
                        InterventionKind::RandomConcept,
                        seed,
                        DonorConcepts::GroundTruth,
                    )
                    .unwrap()
                });
                assert_eq!(accs.len(), 8);
                accs
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweep_cells, bench_intervention_seeds);
criterion_main!(benches);
