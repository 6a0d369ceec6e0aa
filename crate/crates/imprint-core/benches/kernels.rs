//! Backend comparison benches. Every measurement is labeled with the
//! compiled backend so the two runs line up in the report:
//!
//!   cargo bench -p imprint-core
//!   cargo bench -p imprint-core --no-default-features
//!
//! Both backends produce bit-identical numbers; only wall time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use imprint_core::autograd::Graph;
use imprint_core::corpus::synthetic_corpus;
use imprint_core::detection::score_dataset;
use imprint_core::networks::{EncoderDesc, Mode, RecoveryEncoder};
use imprint_core::par::backend_is_parallel;
use imprint_core::plane::Image;
use imprint_core::rng::RngStream;
use imprint_core::template::TemplateSet;

const SIDE: usize = 64;
const BATCH: usize = 4;

fn backend() -> &'static str {
    if backend_is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn bench_images(count: usize, seed: u64) -> Vec<Image<f32>> {
    let mut rng = RngStream::new(seed);
    (0..count)
        .map(|_| Image::from_shape_fn((3, SIDE, SIDE), |_| rng.unit_f64() as f32))
        .collect()
}

fn encoder_forward(c: &mut Criterion) {
    let enc = RecoveryEncoder::<f32>::init(EncoderDesc::desk(), 1);
    let images = bench_images(BATCH, 2);
    let mut group = c.benchmark_group("encoder_forward");
    group.sample_size(10);
    group.bench_function(BenchmarkId::from_parameter(backend()), |b| {
        b.iter(|| {
            let g = Graph::<f32>::new();
            let items: Vec<_> = images
                .iter()
                .map(|img| g.constant(img.clone().into_dyn()))
                .collect();
            let input = g.stack0(&items);
            let pass = enc.forward(&g, input, Mode::Eval, false);
            g.value(pass.out)
        })
    });
    group.finish();
}

fn encoder_backward(c: &mut Criterion) {
    let enc = RecoveryEncoder::<f32>::init(EncoderDesc::desk(), 1);
    let images = bench_images(BATCH, 3);
    let mut group = c.benchmark_group("encoder_backward");
    group.sample_size(10);
    group.bench_function(BenchmarkId::from_parameter(backend()), |b| {
        b.iter(|| {
            let g = Graph::<f32>::new();
            let items: Vec<_> = images
                .iter()
                .map(|img| g.constant(img.clone().into_dyn()))
                .collect();
            let input = g.stack0(&items);
            let pass = enc.forward(&g, input, Mode::Train, true);
            let root = g.mean(pass.out);
            g.backward(root)
        })
    });
    group.finish();
}

fn corpus_synthesis(c: &mut Criterion) {
    let mut group = c.benchmark_group("corpus_synthesis");
    group.sample_size(10);
    group.bench_function(BenchmarkId::from_parameter(backend()), |b| {
        b.iter(|| synthetic_corpus::<f32>(16, 7))
    });
    group.finish();
}

fn corpus_scoring(c: &mut Criterion) {
    let enc = RecoveryEncoder::<f32>::init(EncoderDesc::desk(), 1);
    let set = TemplateSet::<f32>::init_uniform(3, SIDE, &mut RngStream::new(5)).unwrap();
    let images = bench_images(16, 4);
    let mut group = c.benchmark_group("corpus_scoring");
    group.sample_size(10);
    group.bench_function(BenchmarkId::from_parameter(backend()), |b| {
        b.iter(|| score_dataset(&enc, &set, &images).unwrap())
    });
    group.finish();
}

criterion_group!(
    kernels,
    encoder_forward,
    encoder_backward,
    corpus_synthesis,
    corpus_scoring
);
criterion_main!(kernels);
