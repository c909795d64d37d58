use criterion::{criterion_group, criterion_main, Criterion};
use fame_core::cohort::{generate_cohort, split_cohort, GeneratorConfig, ModalityDef};
use fame_core::model::{Batch, FusionMode, FusionState};
use fame_core::train::{train, TrainConfig};

fn desk_cohort() -> fame_core::cohort::Cohort {
    generate_cohort(&GeneratorConfig {
        n: 600,
        modalities: vec![
            ModalityDef { name: "demographic".into(), width: 16 },
            ModalityDef { name: "structured".into(), width: 64 },
            ModalityDef { name: "notes".into(), width: 64 },
        ],
        seed: 5,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn bench_generate(c: &mut Criterion) {
    c.bench_function("generate_cohort_n600", |bench| {
        bench.iter(desk_cohort);
    });
}

fn bench_probe_pass(c: &mut Criterion) {
    let cohort = desk_cohort();
    let state =
        FusionState::init(&cohort.schema.modalities, 32, 64, 3, FusionMode::Fame, 0.2, 5).unwrap();
    let ids: Vec<String> = cohort.records.iter().map(|r| r.id.clone()).collect();
    let batch = Batch::from_cohort(&cohort, &ids).unwrap();
    c.bench_function("probe_eddi_n600", |bench| {
        bench.iter(|| state.probe_eddi(&batch, 0.5).unwrap());
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let cohort = desk_cohort();
    let split = split_cohort(&cohort, 5).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 32,
        max_epochs: 1,
        proj_dim: 32,
        hidden_dim: 64,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("one_epoch_n600_fame", |bench| {
        bench.iter(|| train(&cohort, &split, &cfg).unwrap());
    });
    group.finish();
}

criterion_group!(benches, bench_generate, bench_probe_pass, bench_train_epoch);
criterion_main!(benches);
