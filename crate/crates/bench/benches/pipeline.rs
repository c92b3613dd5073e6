//! Hot paths of the beamforming pipeline, benchmarked at the sizes the
//! desk-scale benchmark actually runs (N = 16 training and sampling) plus the
//! N = 64 beam operations the sanity checks sweep.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use gsbf_core::{
    best_codebook_beam, dft_codebook, generate_dataset, linear_schedule, measure_rsrp, mrt,
    normalized_gain, probing_codebook, sample, synthesize_channel, training_loss, ArrayConfig,
    BeamTarget, CodebookKind, DenoiserArch, DiffusionModel, RngStream, ScenarioId, SiteScenario,
    TrainExample,
};

fn desk_model(prompt_dim: usize) -> DiffusionModel {
    let arch = DenoiserArch {
        hidden: vec![160, 160, 160],
        time_embed_dim: 32,
        prompt_embed_dim: 32,
    };
    let schedule = linear_schedule(100, 1e-3, 0.15);
    DiffusionModel::new(16, prompt_dim, schedule, &arch, &mut RngStream::new(9, 0))
}

fn beam_ops(c: &mut Criterion) {
    let array = ArrayConfig::new(64);
    let h = array.steering_vector(0.4);
    let w = mrt(&h);
    let codebook = dft_codebook(64);

    c.bench_function("steering_vector_n64", |b| {
        b.iter(|| array.steering_vector(black_box(0.4)))
    });
    c.bench_function("normalized_gain_n64", |b| {
        b.iter(|| normalized_gain(black_box(&w), black_box(&h)))
    });
    c.bench_function("dft_sweep_best_of_64", |b| {
        b.iter(|| best_codebook_beam(black_box(&codebook), black_box(&h)))
    });
}

fn sensing_and_synthesis(c: &mut Criterion) {
    let array = ArrayConfig::new(16);
    let scenario = SiteScenario::default_for(ScenarioId::IndoorNlos);
    let position = scenario.ue_grid.point(0);
    let sample = synthesize_channel(&scenario, &array, position, &mut RngStream::new(3, 0));
    let codebook = probing_codebook(&array, 12, CodebookKind::DftSubset);

    c.bench_function("synthesize_channel_indoor_n16", |b| {
        b.iter_batched(
            || RngStream::new(3, 1),
            |mut rng| synthesize_channel(&scenario, &array, black_box(position), &mut rng),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("measure_rsrp_m12", |b| {
        b.iter(|| measure_rsrp(black_box(&codebook), black_box(&sample.h), None, None))
    });
}

fn diffusion_paths(c: &mut Criterion) {
    let model = desk_model(12);
    let prompt: Vec<f64> = (0..12).map(|i| (i as f64) / 12.0).collect();
    let y_t: Vec<f64> = RngStream::new(4, 0).standard_normal_vec(32);
    let batch: Vec<TrainExample> = (0..128)
        .map(|i| {
            let mut r = RngStream::new(5, i);
            let mut y = r.standard_normal_vec(32);
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut y {
                *v /= norm;
            }
            TrainExample {
                prompt: prompt.clone(),
                target: BeamTarget { y },
            }
        })
        .collect();
    let refs: Vec<&TrainExample> = batch.iter().collect();

    c.bench_function("denoiser_forward_n16", |b| {
        b.iter(|| model.denoise(black_box(&y_t), black_box(50), black_box(&prompt)))
    });

    let mut group = c.benchmark_group("heavy");
    group.sample_size(10);
    group.bench_function("training_loss_batch128", |b| {
        b.iter_batched(
            || RngStream::new(6, 0),
            |mut rng| training_loss(black_box(&model), black_box(&refs), &mut rng),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("reverse_sample_100_steps", |b| {
        b.iter_batched(
            || RngStream::new(7, 0),
            |mut rng| sample(black_box(&model), black_box(&prompt), &mut rng),
            BatchSize::SmallInput,
        )
    });
    let scenario = SiteScenario::default_for(ScenarioId::IndoorNlos);
    let array = ArrayConfig::new(16);
    group.bench_function("generate_dataset_100_samples", |b| {
        b.iter(|| generate_dataset(black_box(&scenario), black_box(&array), 100, 11))
    });
    group.finish();
}

criterion_group!(benches, beam_ops, sensing_and_synthesis, diffusion_paths);
criterion_main!(benches);
