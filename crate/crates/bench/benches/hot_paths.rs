use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use stemgen_bench::*;
use stemgen_core::edit::ModelSequence;
use stemgen_core::metrics::beat_f_measure;
use stemgen_core::model::{cross_entropy, Condition, ModelInput};
use stemgen_core::rvq::rvq_encode;
use stemgen_core::sampler::{generate, DecodeParams};
use stemgen_core::{apply_delay, remove_delay, LayoutSpec};

fn delay(c: &mut Criterion) {
    let grid = random_grid(&LayoutSpec::audio_default(), 1500, 1);
    let delayed = apply_delay(&grid);
    c.bench_function("apply_delay/1500x6", |b| b.iter(|| apply_delay(black_box(&grid))));
    c.bench_function("remove_delay/1500x6", |b| {
        b.iter(|| remove_delay(black_box(&delayed)).unwrap())
    });
}

fn rvq(c: &mut Criterion) {
    let (frames, set) = other_frames_and_codebooks(50);
    c.bench_function("rvq_encode/2400x16d/4x16", |b| {
        b.iter(|| rvq_encode(black_box(&frames), &set).unwrap())
    });
}

fn beats(c: &mut Criterion) {
    let reference: Vec<f64> = (0..400).map(|i| i as f64 * 0.5).collect();
    let estimated: Vec<f64> = (0..400)
        .map(|i| i as f64 * 0.5 + if i % 3 == 0 { 0.05 } else { 0.1 })
        .collect();
    c.bench_function("beat_f_measure/400", |b| {
        b.iter(|| beat_f_measure(black_box(&reference), black_box(&estimated), 0.07).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let model = toy_model(0);
    let grid = &songs(1, 0)[0];
    let seq = ModelSequence::plain(grid);
    let input = ModelInput::from_sequence(&seq, Condition::Id(1));
    c.bench_function("forward/toy/48", |b| {
        b.iter(|| model.forward(black_box(&input)).unwrap())
    });
    c.bench_function("forward_backward/toy/48", |b| {
        b.iter_batched(
            || model.params.zeros_like(),
            |mut grads| {
                let fwd = model.forward_train(&input).unwrap();
                let (_, d) = cross_entropy(&fwd.logits, seq.grid.grid(), &seq.loss_mask, Some(1.0)).unwrap();
                model.backward(&fwd, &d.unwrap(), &mut grads);
                grads
            },
            BatchSize::SmallInput,
        )
    });
    let params = DecodeParams::default();
    c.bench_function("generate/toy/48/cfg", |b| {
        b.iter(|| generate(&model, Condition::Id(1), 48, &params, 0).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = delay, rvq, beats, model
}
criterion_main!(benches);
