//! Corpus inference and kNN classification under both execution policies.
//! Build with `--no-default-features` to see the sequential fallback alone.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use hypertopic::config::RunConfig;
use hypertopic::corpus::Split;
use hypertopic::doc_topic::TreeLayout;
use hypertopic::eval::knn_classify;
use hypertopic::exec::Exec;
use hypertopic::geometry::Curvature;
use hypertopic::model::{Model, ModelShape};
use hypertopic::pipeline::eval_neighbors;
use hypertopic::synth::branch_corpus;
use hypertopic::train::{initial_tree, INFER_CHUNK};

fn bench(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let graph = branch_corpus(0).graph(&cfg.corpus);
    let split = Split::new(graph.len(), cfg.corpus.split, cfg.corpus.split_seed);
    let shape = ModelShape::from_config(&cfg, graph.vocab.len(), 0);
    let model = Model::new(shape, 0, Curvature::new(1.0).unwrap(), cfg.ablation);
    let layout = TreeLayout::new(&initial_tree(&cfg));
    let docs: Vec<Vec<usize>> = graph.docs.iter().map(|d| d.tokens.clone()).collect();
    let nb = eval_neighbors(&graph, &split, cfg.loss.max_neighbors);

    let mut group = c.benchmark_group("infer_200_docs");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| black_box(model.infer(&layout, &docs, &nb, exec, INFER_CHUNK)))
        });
    }
    group.finish();

    let inf = model.infer(&layout, &docs, &nb, Exec::default(), INFER_CHUNK);
    let rows: Vec<Vec<f64>> = inf.d.rows().into_iter().map(|r| r.to_vec()).collect();
    let (train, test) = rows.split_at(150);
    let labels: Vec<usize> = (0..train.len()).map(|i| graph.label(i).unwrap_or(0)).collect();
    let mut group = c.benchmark_group("knn_50_queries");
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| black_box(knn_classify(train, &labels, test, cfg.eval.kappa, model.space, exec)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
