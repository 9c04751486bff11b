//! Parallel against sequential dispatch for the heavy kernels and one
//! training step. Both modes compute bit-identical results.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use octscreen::model::{classifier_forward, Model, ModelConfig};
use octscreen::nn::{Mode, Session};
use octscreen::tensor::{conv2d, Padding};
use octscreen::{par, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn randn(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn bench_conv(c: &mut Criterion) {
    let x = randn([16, 32, 28, 28], 1);
    let w = randn([32, 32, 3, 3], 2);
    let mut group = c.benchmark_group("conv2d_16x32x28x28_k3");
    for (label, on) in MODES {
        par::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| conv2d(&x, &w, None, 1, Padding::Same).unwrap())
        });
    }
    group.finish();
}

fn bench_inference(c: &mut Criterion) {
    let mut model = Model::new(ModelConfig::toy(), 0).unwrap();
    let x = randn([32, 3, 56, 56], 3);
    let mut group = c.benchmark_group("toy_inference_batch32");
    for (label, on) in MODES {
        par::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| model.logits(&x).unwrap())
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let mut model = Model::new(cfg.clone(), 0).unwrap();
    let x = randn([16, 3, 56, 56], 4);
    let mut group = c.benchmark_group("toy_forward_backward_batch16");
    group.sample_size(10);
    for (label, on) in MODES {
        par::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(label), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let logits = {
                    let mut s = Session::new(&mut g, &mut model.params, Mode::Train, 1);
                    let input = s.graph.input(x.clone());
                    classifier_forward(&mut s, &cfg, input).unwrap().logits
                };
                let loss = g.mean_all(logits).unwrap();
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_inference, bench_train_step);
criterion_main!(benches);
