use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use sesrec::model::AlignNegatives;
use sesrec::trainer::{batch_gradients, dense_examples, model_config_for};
use sesrec::{evaluate, generate_synthetic, Corpus, PrepConfig, SesRec, SynthConfig, TrainConfig};
use std::hint::black_box;

fn setup() -> (Corpus, SesRec) {
    let synth = SynthConfig { n_users: 300, ..SynthConfig::default() };
    let data = generate_synthetic(&synth, 1).unwrap();
    let corpus = Corpus::prepare(&data.records, &PrepConfig::default(), 1).unwrap();
    let model = SesRec::new(model_config_for(&corpus), 1).unwrap();
    (corpus, model)
}

fn scoring(c: &mut Criterion) {
    let (corpus, model) = setup();
    let case = &corpus.test[0];
    let input = corpus.input(&case.example);
    let cands: Vec<usize> = (1..=100).collect();
    c.bench_function("score 100 candidates", |b| b.iter(|| model.score(black_box(&input), &cands, &corpus.dense_catalog).unwrap()));
    c.bench_function("selection", |b| b.iter(|| model.selection(black_box(&input), &corpus.dense_catalog).unwrap()));
}

fn training(c: &mut Criterion) {
    let (corpus, model) = setup();
    let examples = dense_examples(&corpus);
    let cfg = TrainConfig::default();
    let negs = AlignNegatives { items: (1..=20).collect(), queries: (1..=20).collect() };
    let mut group = c.benchmark_group("batch gradients");
    group.sample_size(10);
    for size in [16, 64] {
        let batch: Vec<_> = examples.iter().take(size).enumerate().collect();
        group.bench_function(format!("{size} examples"), |b| {
            b.iter_batched(|| batch.clone(), |batch| batch_gradients(&model, &batch, &corpus.dense_catalog, &negs, &cfg, 0), BatchSize::SmallInput)
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let (corpus, model) = setup();
    let cases = &corpus.test[..100.min(corpus.test.len())];
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    group.bench_function("100 users", |b| b.iter(|| evaluate(&model, &corpus, black_box(cases)).unwrap()));
    group.finish();
}

criterion_group!(benches, scoring, training, evaluation);
criterion_main!(benches);
