use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ragdistill::distill::{loss_gradient, retriever_distribution, train_head, TrainerConfig};
use ragdistill::{HeadTag, ProjectionHead, SimulatedReader, SimulatedReaderParams};

fn bench_gradient(c: &mut Criterion) {
    let d = 32;
    let k = 8;
    let query: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
    let embs: Vec<Vec<f64>> = (0..k).map(|j| (0..d).map(|i| ((i * j) as f64 * 0.11).cos()).collect()).collect();
    let scores: Vec<f64> = embs.iter().map(|e| e.iter().zip(&query).map(|(a, b)| a * b).sum()).collect();
    let p = retriever_distribution(&scores, 1.0).unwrap();
    let mut q = vec![0.02; k];
    q[0] = 1.0 - 0.02 * (k - 1) as f64;
    c.bench_function("loss_gradient d=32 K=8", |b| {
        b.iter(|| loss_gradient(black_box(&p), black_box(&q), 1.0, &embs, &query).unwrap())
    });
}

fn bench_epoch(c: &mut Criterion) {
    let corpus = ragdistill_bench::corpus(50);
    let reader = SimulatedReader::new(SimulatedReaderParams::default()).unwrap();
    let config = TrainerConfig { candidates: 8, epochs: 1, ..TrainerConfig::default() };
    let init = ProjectionHead::identity(HeadTag::Image, corpus.index.dim());
    let mut group = c.benchmark_group("train_head");
    group.sample_size(20);
    group.bench_function("one epoch, 200 queries", |b| {
        b.iter(|| train_head(&corpus.index, &corpus.train_queries, &reader, init.clone(), &config).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_gradient, bench_epoch);
criterion_main!(benches);
