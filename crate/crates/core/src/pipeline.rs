//! Corpus-level inference and the evaluation protocol.
//!
//! Evaluation embeds every document with graph attention restricted to
//! train-train edges; validation and test documents see no neighbors, so
//! nothing about held-out links reaches their embeddings.

use std::collections::HashSet;

use crate::config::RunConfig;
use crate::corpus::{DocumentGraph, EdgeClass, Part, Split, Vocab};
use crate::doc_topic::TreeLayout;
use crate::eval::{self, EvalReport, TopicWords, WindowReference};
use crate::exec::Exec;
use crate::model::{Inference, Model};
use crate::tape::Mat;
use crate::train::{cap_neighbors, INFER_CHUNK};
use crate::tree::TopicTree;

/// Neighbor lists used at evaluation time: train-train edges only, capped.
pub fn eval_neighbors(graph: &DocumentGraph, split: &Split, max_neighbors: usize) -> Vec<Vec<usize>> {
    let parts = split.parts(graph.len());
    cap_neighbors(&graph.adjacency(|i| parts[i] == Part::Train), max_neighbors)
}

pub fn infer_corpus(
    model: &Model,
    tree: &TopicTree,
    graph: &DocumentGraph,
    neighbors: &[Vec<usize>],
    exec: Exec,
) -> Inference {
    let layout = TreeLayout::new(tree);
    let docs: Vec<Vec<usize>> = graph.docs.iter().map(|d| d.tokens.clone()).collect();
    model.infer(&layout, &docs, neighbors, exec, INFER_CHUNK)
}

/// Indices of the `k` largest entries, ties to the lower index.
pub fn top_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-`k` word ids per topic in BFS order, from `beta^T` rows.
pub fn top_word_ids(beta_t: &Mat, k: usize) -> Vec<Vec<usize>> {
    beta_t
        .rows()
        .into_iter()
        .map(|r| top_indices(r.as_slice().expect("standard layout"), k))
        .collect()
}

pub fn topic_words(tree: &TopicTree, beta_t: &Mat, vocab: &Vocab, k: usize) -> Vec<TopicWords> {
    let layout = TreeLayout::new(tree);
    layout
        .order
        .iter()
        .zip(top_word_ids(beta_t, k))
        .map(|(&id, words)| TopicWords {
            id,
            level: tree.node(id).expect("layout node").level,
            words: words.into_iter().map(|w| vocab.word(w).to_string()).collect(),
        })
        .collect()
}

fn rows(m: &Mat, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| m.row(i).to_vec()).collect()
}

/// All four metrics on the test part of `split`.
pub fn evaluate(
    model: &Model,
    tree: &TopicTree,
    graph: &DocumentGraph,
    split: &Split,
    cfg: &RunConfig,
    exec: Exec,
) -> EvalReport {
    let nb = eval_neighbors(graph, split, cfg.loss.max_neighbors);
    let inf = infer_corpus(model, tree, graph, &nb, exec);
    let beta_t = model.topic_word_rows(&inf.z);
    let test = &split.test;

    // Classification: labelled train docs vote for labelled test docs.
    let (train_l, test_l): (Vec<(usize, usize)>, Vec<(usize, usize)>) = (
        split
            .train
            .iter()
            .filter_map(|&i| graph.label(i).map(|l| (i, l)))
            .collect(),
        test.iter().filter_map(|&i| graph.label(i).map(|l| (i, l))).collect(),
    );
    let (micro_f1, macro_f1) = if train_l.is_empty() || test_l.is_empty() {
        (None, None)
    } else {
        let tr_idx: Vec<usize> = train_l.iter().map(|p| p.0).collect();
        let te_idx: Vec<usize> = test_l.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = train_l.iter().map(|p| p.1).collect();
        let gold: Vec<usize> = test_l.iter().map(|p| p.1).collect();
        let pred = eval::knn_classify(
            &rows(&inf.d, &tr_idx),
            &labels,
            &rows(&inf.d, &te_idx),
            cfg.eval.kappa,
            model.space,
            exec,
        );
        let (mi, ma) = eval::f1_scores(&pred, &gold);
        (Some(mi), Some(ma))
    };

    // Perplexity on test bags under d_hat = theta beta.
    let theta_test = inf.theta.select(ndarray::Axis(0), test);
    let dhat = theta_test.dot(&beta_t);
    let dhat_rows: Vec<Vec<f64>> = dhat.rows().into_iter().map(|r| r.to_vec()).collect();
    let counts: Vec<Vec<(usize, f64)>> = test.iter().map(|&i| graph.counts(i)).collect();
    let perplexity_exponent = eval::perplexity_exponent(&dhat_rows, &counts);

    // Coherence against the training documents.
    let top = top_word_ids(&beta_t, cfg.eval.top_k);
    let focus: HashSet<usize> = top.iter().flatten().copied().collect();
    let ref_docs: Vec<Vec<usize>> = split.train.iter().map(|&i| graph.docs[i].tokens.clone()).collect();
    let reference = WindowReference::build(&ref_docs, cfg.eval.npmi_window, cfg.eval.npmi_smoothing, Some(&focus));
    let npmi = eval::npmi(&top, &reference, cfg.eval.top_k);

    // Link prediction among test documents.
    let pos = split.edges_of(graph, EdgeClass::Test);
    let link_auc = if pos.is_empty() {
        None
    } else {
        let neg = eval::sample_negative_pairs(test, &graph.edges, pos.len(), cfg.eval.negative_seed);
        let embs: Vec<Vec<f64>> = inf.d.rows().into_iter().map(|r| r.to_vec()).collect();
        let a = eval::link_auc(&embs, &pos, &neg, model.space);
        a.is_finite().then_some(a)
    };

    EvalReport {
        micro_f1,
        macro_f1,
        npmi,
        perplexity_exponent,
        link_auc,
        test_docs: test.len(),
        test_edges: pos.len(),
        topics: topic_words(tree, &beta_t, &graph.vocab, cfg.eval.top_k),
    }
}
