use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xfsl_bench::{fixture, samples};
use xfsl_core::active::{select_top_k, AcquisitionRecord};
use xfsl_core::attribution::{grad_cam_batch, Target};
use xfsl_core::fewshot::sample_episode;
use xfsl_core::trainer::{build_episode_graph, TrainConfig};
use xfsl_core::{Graph, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[15, 16, 32, 32]);
    let w = random_tensor(&mut rng, &[32, 16, 3, 3]);
    let b = random_tensor(&mut rng, &[32]);
    c.bench_function("conv2d_forward_backward_15x16x32x32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.input(x.clone(), true);
            let wv = g.input(w.clone(), true);
            let bv = g.input(b.clone(), true);
            let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap();
            g.scalar(loss)
        })
    });
}

fn encoder(c: &mut Criterion) {
    let f = fixture();
    let images: Vec<&Tensor> = f.samples.iter().map(|s| &s.image).collect();
    c.bench_function("embed_15_images", |bench| bench.iter(|| f.encoder.embed(&images).unwrap()));
    c.bench_function("grad_cam_15_images", |bench| {
        bench.iter(|| grad_cam_batch(&f.encoder, &f.prototypes, &images, &Target::Predicted).unwrap())
    });
}

fn episode(c: &mut Criterion) {
    let f = fixture();
    let pool = samples(10, 3);
    let episode = sample_episode(&pool, 3, 5, 5, 0).unwrap();
    let config = TrainConfig::default();
    c.bench_function("guided_episode_loss_and_gradient", |bench| {
        bench.iter(|| {
            let mut eg = build_episode_graph(&f.encoder, &episode, &config).unwrap();
            eg.graph.backward(eg.l_total).unwrap();
            eg.breakdown()
        })
    });
}

fn selection(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let records: Vec<AcquisitionRecord> = (0..560)
        .map(|i| AcquisitionRecord {
            round: 1,
            sample_id: format!("train_pool_{i:05}"),
            entropy: rng.random_range(0.0..1.1),
            misalignment: rng.random_range(0.0..1.0),
            score: (rng.random_range(0..200) as f64) / 200.0,
            predicted_class: i % 3,
            selected: false,
        })
        .collect();
    c.bench_function("select_top_24_of_560", |bench| {
        bench.iter_batched(|| records.clone(), |r| select_top_k(&r, 24), BatchSize::SmallInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, encoder, episode, selection
}
criterion_main!(benches);
