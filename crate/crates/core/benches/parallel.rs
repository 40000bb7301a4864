//! Rayon data-parallel paths against the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use qghc::data::Dataset;
use qghc::model::{Model, ModelConfig};
use qghc::nn::conv::{backward_input, backward_kernel, forward, ConvGeom};
use qghc::params::ParamStore;
use qghc::train::{predict_all, train_step, AdamState, Batch};
use qghc::{par, Rng, Tensor};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn run<R>(parallel: bool, f: impl FnOnce() -> R) -> R {
    if parallel {
        f()
    } else {
        par::sequential(f)
    }
}

fn conv(c: &mut Criterion) {
    let g = ConvGeom::new(&[32, 32, 8, 8], &[32, 8, 3, 3], 1, 1, 4).unwrap();
    let mut rng = Rng::new(1);
    let x = Tensor::<f32>::uniform(&[32, 32, 8, 8], -1.0, 1.0, &mut rng).unwrap();
    let k = Tensor::<f32>::uniform(&[32, 8, 3, 3], -1.0, 1.0, &mut rng).unwrap();
    let gy = Tensor::<f32>::uniform(&[32, 32, 8, 8], -1.0, 1.0, &mut rng).unwrap();
    let mut group = c.benchmark_group("grouped_conv_3x3");
    for (name, p) in modes() {
        group.bench_with_input(BenchmarkId::new("forward", name), &p, |b, &p| {
            b.iter(|| run(p, || forward(&g, x.data(), k.data())))
        });
        group.bench_with_input(BenchmarkId::new("backward", name), &p, |b, &p| {
            b.iter(|| {
                run(p, || {
                    (
                        backward_input(&g, k.data(), gy.data()),
                        backward_kernel(&g, x.data(), gy.data()),
                    )
                })
            })
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let data = Dataset::generate(1, 256);
    let cfg = ModelConfig::toy(data.vocab.words.len(), data.vocab.answers.len());
    let batch = Batch::gather(&data, &(0..64).collect::<Vec<_>>(), true).unwrap();
    let mut group = c.benchmark_group("toy_model");
    group.sample_size(10);
    for (name, p) in modes() {
        group.bench_with_input(BenchmarkId::new("train_step_b64", name), &p, |b, &p| {
            let mut store = ParamStore::<f32>::new(1);
            let model = Model::declare(&mut store, &cfg).unwrap();
            let mut adam = AdamState::new(&store, 5e-4);
            b.iter(|| run(p, || train_step(&model, &mut store, &mut adam, &batch).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("predict_256", name), &p, |b, &p| {
            let mut store = ParamStore::<f32>::new(1);
            let model = Model::declare(&mut store, &cfg).unwrap();
            b.iter(|| run(p, || predict_all(&model, &store, &data).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, training);
criterion_main!(benches);
