use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use lair_bench::fixture;
use lair_core::dtformer::Sampling;
use lair_core::explain::infer_video;
use lair_core::model::ObjectiveConfig;
use lair_core::numerics::{Graph, NoiseKey};

fn training_step(c: &mut Criterion) {
    let f = fixture(8).unwrap();
    let objective = ObjectiveConfig::default();
    c.bench_function("forward_backward_batch8", |b| {
        b.iter_batched(
            Graph::new,
            |mut g| {
                let out = f
                    .model
                    .forward_loss(&mut g, &f.grids, &objective, Sampling::Hard { seed: 0, step: 0 }, 1.0, NoiseKey::new(0, 0, 0))
                    .unwrap();
                g.backward(out.total).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn inference(c: &mut Criterion) {
    let f = fixture(1).unwrap();
    c.bench_function("video_only_inference", |b| b.iter(|| infer_video(&f.model, &f.samples[0]).unwrap()));
}

criterion_group!(benches, training_step, inference);
criterion_main!(benches);
