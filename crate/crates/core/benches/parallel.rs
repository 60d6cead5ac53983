use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use roomlayout::losses::{LossWeights, CAM_HEIGHT};
use roomlayout::model::{Model, ModelConfig};
use roomlayout::pipeline::synth::{random_room, render_panorama, stream_rng, Style};
use roomlayout::pipeline::train::batch_gradients;
use roomlayout::pipeline::{
    evaluate_samples, generate_synthetic, load_split, prepare, EvalOptions, RoomFamily, Split, SynthSpec,
};
use roomlayout::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_render(c: &mut Criterion) {
    let spec = SynthSpec::default();
    let mut rng = stream_rng(1, 0);
    let room = random_room(&mut rng, &spec, RoomFamily::LShape);
    let style = Style::random(&mut rng, room.floorplan.len());
    let mut group = c.benchmark_group("render_panorama");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| render_panorama(&room, &style, 256, 2, exec))
        });
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        rooms: 4,
        seed: 2,
        ..SynthSpec::default()
    };
    let manifest = generate_synthetic(&spec, dir.path(), Execution::Parallel).unwrap();
    let config = ModelConfig::tiny();
    let model = Model::new(config.clone()).unwrap();
    let params = model.init_params(0);
    let samples = load_split(&manifest, Split::Train, Execution::Parallel).unwrap();
    let prepared: Vec<_> = samples.iter().map(|s| prepare(s, &config, true).unwrap()).collect();
    let batch: Vec<_> = prepared.iter().collect();
    let weights = LossWeights::default();

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&model, &params, &batch, &weights, CAM_HEIGHT, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate_samples");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_samples(&samples, &model, &params, &EvalOptions::default(), None, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render, bench_model);
criterion_main!(benches);
