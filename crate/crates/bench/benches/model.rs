use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidlang_core::data::generate_synthetic_corpus;
use vidlang_core::eval::score_all;
use vidlang_core::{Graph, Model, ModelConfig, Tensor};

fn matmul(c: &mut Criterion) {
    let a = Tensor::<f32>::full(&[128, 64], 0.5);
    let b = Tensor::<f32>::full(&[64, 128], 0.25);
    c.bench_function("matmul_128x64x128", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
            black_box(g.matmul(x, y).unwrap());
        })
    });
}

fn encoders(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
    let corpus = generate_synthetic_corpus(0, 16, &cfg, false).unwrap();
    c.bench_function("encode_video_toy", |bench| {
        bench.iter(|| {
            let mut g = model.inference_graph();
            black_box(model.encode_video(&mut g, &corpus[0].video).unwrap());
        })
    });
    c.bench_function("retrieval_step_b8_forward_backward", |bench| {
        let videos: Vec<_> = corpus[..8].iter().map(|p| &p.video).collect();
        let captions: Vec<_> = corpus[..8].iter().map(|p| &p.caption).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        bench.iter(|| {
            let mut g = model.graph();
            let out = model.retrieval_step(&mut g, &videos, &captions, &mut rng).unwrap();
            black_box(g.backward(out.total).unwrap());
        })
    });
    let mut group = c.benchmark_group("scoring");
    group.sample_size(10);
    group.bench_function("score_all_16", |bench| bench.iter(|| black_box(score_all(&model, &corpus).unwrap())));
    group.finish();
}

criterion_group!(benches, matmul, encoders);
criterion_main!(benches);
