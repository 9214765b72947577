use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use got_core::datasets::{build_vocabulary, generate_synthetic_corpus, TemplateSet};
use got_core::infer_eval::{evaluate_captioning, evaluate_retrieval};
use got_core::model::{Model, ModelConfig, Task};
use got_core::par::ExecMode;

fn corpus_eval(c: &mut Criterion) {
    let ds = generate_synthetic_corpus(16, 3, (64, 64), &TemplateSet::default()).unwrap();
    let vocab = build_vocabulary(&ds.all_captions(), 1);
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for task in [Task::Caption, Task::Retrieval] {
        let cfg = ModelConfig::toy(task, ds.num_superclasses(), vocab.len());
        let model = Model::new(cfg, vocab.clone(), ds.superclasses.clone(), 1).unwrap();
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            let id = BenchmarkId::new(task.as_str(), format!("{mode:?}"));
            group.bench_function(id, |b| {
                b.iter(|| black_box(match task {
                    Task::Caption => evaluate_captioning(&model, &ds, mode).unwrap(),
                    Task::Retrieval => evaluate_retrieval(&model, &ds, mode).unwrap(),
                }))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, corpus_eval);
criterion_main!(benches);
