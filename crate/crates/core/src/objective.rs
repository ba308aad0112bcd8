//! Topic reconstruction, graph contrastive and supervised losses.

use crate::model::ClassifierParams;
use crate::params::{ParamId, ParamStore};
use crate::tape::{logsumexp, ContrastItem, Tape, Var, PROB_FLOOR};

/// Loss weights and the contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_topic: f64,
    pub lambda_sup: f64,
    pub tau: f64,
}

/// `beta^T`: row `t` is `softmax(U log_0(z_t))`, so the result is `T x |V|`
/// with rows summing to 1.
pub fn topic_word<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, decoder: ParamId, z: Var) -> Var {
    let u = tape.param(store, decoder);
    let lz = tape.log0(z);
    let logits = tape.matmul_bt(lz, u);
    tape.softmax_rows(logits)
}

/// `d_hat = beta theta`, one row per document.
pub fn reconstruct(tape: &mut Tape<'_>, theta: Var, beta_t: Var) -> Var {
    tape.matmul(theta, beta_t)
}

/// Summed `-sum_w d_w ln d_hat_w` over documents.
pub fn topic_loss(tape: &mut Tape<'_>, dhat: Var, counts: &[Vec<(usize, f64)>]) -> Var {
    tape.topic_nll(dhat, counts.to_vec())
}

/// Summed contrastive loss over `items`; `sqd` holds squared distances
/// between anchor rows and candidate columns.
pub fn graph_loss(tape: &mut Tape<'_>, sqd: Var, items: Vec<ContrastItem>, tau: f64) -> Var {
    tape.info_nce(sqd, items, tau)
}

/// Classifier logits `MLP(log_0(d))`.
pub fn classifier_logits<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, p: ClassifierParams, d: Var) -> Var {
    let (w1, c1, w2, c2) = (
        tape.param(store, p.w1),
        tape.param(store, p.c1),
        tape.param(store, p.w2),
        tape.param(store, p.c2),
    );
    let x = tape.log0(d);
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, c1);
    let h = tape.gelu(h);
    let o = tape.matmul(h, w2);
    tape.add_row(o, c2)
}

/// Summed cross-entropy of the classifier against `labels`.
pub fn supervised_loss(tape: &mut Tape<'_>, logits: Var, labels: Vec<usize>) -> Var {
    tape.softmax_xent(logits, labels)
}

/// `L_graph + lambda_topic L_topic (+ lambda_sup L_sup)`.
pub fn total_loss(tape: &mut Tape<'_>, graph: Var, topic: Var, sup: Option<Var>, w: LossWeights) -> Var {
    let t = tape.scale(topic, w.lambda_topic);
    let mut total = tape.add(graph, t);
    if let Some(s) = sup {
        let s = tape.scale(s, w.lambda_sup);
        total = tape.add(total, s);
    }
    total
}

/// `-sum_w counts_w ln max(dhat_w, floor)` for one document.
pub fn topic_loss_value(counts: &[(usize, f64)], dhat: &[f64]) -> f64 {
    counts.iter().map(|&(w, c)| -c * dhat[w].max(PROB_FLOOR).ln()).sum()
}

/// Contrastive loss for one anchor from squared distances.
pub fn graph_loss_value(pos_sq: f64, neg_sq: &[f64], tau: f64) -> f64 {
    let mut logits = vec![-pos_sq / tau];
    logits.extend(neg_sq.iter().map(|d| -d / tau));
    logsumexp(&logits) - logits[0]
}

/// Cross-entropy of `softmax(logits)` at `label`.
pub fn supervised_loss_value(logits: &[f64], label: usize) -> f64 {
    logsumexp(logits) - logits[label]
}
