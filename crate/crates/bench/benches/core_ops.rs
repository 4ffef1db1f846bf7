use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mtdiff::inference::sample_chains;
use mtdiff::training::{batch_loss, forward_loss, prepare_batch};
use mtdiff::{Model, NoiseSchedule, SamplerConfig, ScheduleKind, Setup, TaskKind, ToyDataset, Trainer, WeightRule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(kind: TaskKind) -> (Setup, ToyDataset, Model) {
    let mut setup = Setup::preset(kind);
    setup.examples = 256;
    let data = setup.dataset().unwrap();
    let model = setup.model_for(&data).unwrap();
    (setup, data, model)
}

fn schedule(c: &mut Criterion) {
    let rules = [WeightRule::TimeRatio { scale: 0.01 }; 2];
    c.bench_function("schedule_build_cosine_1000x2", |b| {
        b.iter(|| NoiseSchedule::build_with_rules(ScheduleKind::Cosine, black_box(1000), &rules).unwrap())
    });
}

fn denoiser(c: &mut Criterion) {
    for kind in [TaskKind::LabeledMixture, TaskKind::MaskedSignals] {
        let (setup, data, model) = setup(kind);
        let examples: Vec<_> = data.examples.iter().take(setup.train.batch).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = prepare_batch(&model, &examples, setup.train.cond_dropout, &mut rng).unwrap();
        let lambda = setup.train.lambda;
        let name = kind.name();

        c.bench_function(&format!("{name}/forward"), |b| {
            b.iter(|| batch_loss(&model, black_box(&batch), lambda).unwrap())
        });
        c.bench_function(&format!("{name}/forward_backward"), |b| {
            b.iter(|| {
                let (_, grads, cache) = forward_loss(&model, black_box(&batch), lambda).unwrap();
                model.denoiser.backward(&cache, &grads).unwrap()
            })
        });
        c.bench_function(&format!("{name}/train_step"), |b| {
            b.iter_batched(
                || Trainer::new(model.clone(), setup.train.clone()).unwrap(),
                |mut trainer| trainer.step_on_batch(&batch).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
}

fn sampler(c: &mut Criterion) {
    let (_, _, model) = setup(TaskKind::LabeledMixture);
    let given = vec![vec![None]; 16];
    c.bench_function("labeled_mixture/sample_16_chains", |b| {
        b.iter(|| sample_chains(&model, &SamplerConfig::unconditional(0), black_box(&given)).unwrap())
    });
}

criterion_group!(benches, schedule, denoiser, sampler);
criterion_main!(benches);
