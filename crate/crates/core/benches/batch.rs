//! Per-dialogue gradient computation for one training batch, data-parallel
//! versus sequential. Without the `parallel` feature both arms run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use negograph::config::{Config, Variant};
use negograph::model::Prepared;
use negograph::synth::{self, SynthConfig};
use negograph::train::{batch_gradients, model_for_corpus};

fn setup(variant: Variant) -> (negograph::model::Model, Vec<Prepared>) {
    let corpus = synth::generate(&SynthConfig { dialogues: 32, turns: 8, ..SynthConfig::default() }).expect("synth");
    let mut cfg = Config { variant, ..Config::default() };
    cfg.model.dialogue_context_embedding = 64;
    let model = model_for_corpus(cfg, &corpus).expect("model");
    let prepared = corpus.dialogues.iter().map(|d| model.prepare(d)).collect();
    (model, prepared)
}

fn bench_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for variant in [Variant::Graph, Variant::None] {
        let (model, prepared) = setup(variant);
        let batch: Vec<usize> = (0..16).collect();
        for (name, parallel) in [("parallel", true), ("sequential", false)] {
            group.bench_with_input(BenchmarkId::new(name, variant), &parallel, |b, &parallel| {
                b.iter(|| batch_gradients(&model, &prepared, &batch, None, parallel).expect("gradients"))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_batch);
criterion_main!(benches);
