use criterion::{black_box, criterion_group, criterion_main, Criterion};

use stransformer::synth::synthesize;
use stransformer::toy_corpus::ToyCorpus;
use stransformer::train::Trainer;
use stransformer::Graph;
use stransformer_bench::desk_model;

fn forward_backward(c: &mut Criterion) {
    let b = desk_model(4);
    let seg = &b.utterances[0][0];
    c.bench_function("segment forward", |bench| {
        bench.iter(|| {
            let mut caches = b.model.new_caches();
            let mut g = Graph::new(&b.store);
            black_box(b.model.forward_segment(&mut g, seg, &mut caches, None).unwrap().values.total)
        })
    });
    c.bench_function("segment forward+backward", |bench| {
        bench.iter(|| {
            let mut caches = b.model.new_caches();
            let mut g = Graph::new(&b.store);
            let f = b.model.forward_segment(&mut g, seg, &mut caches, None).unwrap();
            black_box(g.backward(f.loss).unwrap())
        })
    });
}

fn train_step(c: &mut Criterion) {
    let run = stransformer::RunConfig::default();
    let toy = ToyCorpus::new(run.toy_spec()).unwrap();
    let corpus = toy.generate(32).unwrap();
    let mut trainer = Trainer::new(run, &corpus).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(20);
    group.bench_function("batch step", |bench| bench.iter(|| black_box(trainer.step().unwrap())));
    group.finish();
}

fn synthesis(c: &mut Criterion) {
    let b = desk_model(2);
    // Untrained stop heads run to the frame cap, so keep the cap small.
    let mut model = b.model.clone();
    model.config.max_frames_per_segment = 24;
    let symbols = &b.symbols[0];
    let mut group = c.benchmark_group("synthesis");
    group.sample_size(10);
    group.bench_function("utterance", |bench| {
        bench.iter(|| black_box(synthesize(&model, &b.store, symbols, 0).unwrap().mel.numel()))
    });
    group.finish();
}

criterion_group!(benches, forward_backward, train_step, synthesis);
criterion_main!(benches);
