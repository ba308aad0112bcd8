//! Evaluation metrics: kNN classification with micro/macro F1, NPMI topic
//! coherence, the perplexity exponent and link-prediction AUC.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::geometry::{self, Curvature, HyperPoint};
use crate::tape::{Space, PROB_FLOOR};

/// Squared distance between two embedding rows in `space`.
pub fn sq_dist(space: Space, a: &[f64], b: &[f64]) -> f64 {
    match space {
        Space::Hyperbolic(k) => geometry::sq_distance(
            &HyperPoint::from_coords_unchecked(a.to_vec()),
            &HyperPoint::from_coords_unchecked(b.to_vec()),
            k,
        ),
        Space::Euclidean => a[1..].iter().zip(&b[1..]).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

/// Hyperbolic distance between rows (Euclidean in the flat ablation).
pub fn dist(space: Space, a: &[f64], b: &[f64]) -> f64 {
    sq_dist(space, a, b).sqrt()
}

/// Majority vote over the `kappa` nearest training points. Vote ties go to
/// the label with the smaller mean distance among the voters, then to the
/// lower label index.
pub fn knn_classify(
    train: &[Vec<f64>],
    labels: &[usize],
    test: &[Vec<f64>],
    kappa: usize,
    space: Space,
    exec: Exec,
) -> Vec<usize> {
    assert_eq!(train.len(), labels.len());
    assert!(!train.is_empty(), "kNN needs at least one training point");
    exec.map(test, |q| {
        let mut d: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, t)| (dist(space, q, t), i)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for &(dd, i) in d.iter().take(kappa) {
            let e = votes.entry(labels[i]).or_default();
            e.0 += 1;
            e.1 += dd;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for (&label, &(count, total)) in &votes {
            let mean = total / count as f64;
            let better = match best {
                None => true,
                Some((_, c, m)) => count > c || (count == c && mean < m),
            };
            if better {
                best = Some((label, count, mean));
            }
        }
        best.expect("kappa >= 1").0
    })
}

/// Micro and macro F1. Macro averages over every label that occurs in
/// either `gold` or `pred`.
pub fn f1_scores(pred: &[usize], gold: &[usize]) -> (f64, f64) {
    assert_eq!(pred.len(), gold.len());
    if gold.is_empty() {
        return (0.0, 0.0);
    }
    let labels: BTreeSet<usize> = pred.iter().chain(gold).copied().collect();
    let mut tp_total = 0usize;
    let mut macro_sum = 0.0;
    for &l in &labels {
        let tp = pred.iter().zip(gold).filter(|(p, g)| **p == l && **g == l).count();
        let fp = pred.iter().zip(gold).filter(|(p, g)| **p == l && **g != l).count();
        let fneg = pred.iter().zip(gold).filter(|(p, g)| **p != l && **g == l).count();
        tp_total += tp;
        let denom = 2 * tp + fp + fneg;
        macro_sum += if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
    }
    // Single-label: total false positives equal total false negatives, so
    // micro precision = micro recall = accuracy.
    let micro = tp_total as f64 / gold.len() as f64;
    (micro, macro_sum / labels.len() as f64)
}

/// Word and word-pair probabilities for NPMI.
pub trait CoherenceReference {
    fn p_word(&self, w: usize) -> f64;
    fn p_pair(&self, a: usize, b: usize) -> f64;
}

/// Sliding-window document co-occurrence statistics. Every window position
/// of width `window` counts as one context (a shorter document is a single
/// window); a word counts at most once per window. `smoothing` is added to
/// pair counts.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowReference {
    windows: f64,
    word: HashMap<usize, f64>,
    pair: HashMap<(usize, usize), f64>,
    smoothing: f64,
}

impl WindowReference {
    /// Counts only pairs among `focus` words (all words when `None`).
    pub fn build(docs: &[Vec<usize>], window: usize, smoothing: f64, focus: Option<&HashSet<usize>>) -> Self {
        let mut word: HashMap<usize, f64> = HashMap::new();
        let mut pair: HashMap<(usize, usize), f64> = HashMap::new();
        let mut windows = 0.0;
        let keep = |w: &usize| focus.is_none_or(|f| f.contains(w));
        for d in docs {
            if d.is_empty() {
                continue;
            }
            let n_win = d.len().saturating_sub(window) + 1;
            for s in 0..n_win {
                let set: BTreeSet<usize> = d[s..(s + window).min(d.len())].iter().copied().filter(keep).collect();
                windows += 1.0;
                let v: Vec<usize> = set.into_iter().collect();
                for (i, &a) in v.iter().enumerate() {
                    *word.entry(a).or_default() += 1.0;
                    for &b in &v[i + 1..] {
                        *pair.entry((a, b)).or_default() += 1.0;
                    }
                }
            }
        }
        Self {
            windows,
            word,
            pair,
            smoothing,
        }
    }
}

impl CoherenceReference for WindowReference {
    fn p_word(&self, w: usize) -> f64 {
        if self.windows == 0.0 {
            return 0.0;
        }
        self.word.get(&w).copied().unwrap_or(0.0) / self.windows
    }

    fn p_pair(&self, a: usize, b: usize) -> f64 {
        if self.windows == 0.0 {
            return 0.0;
        }
        let key = (a.min(b), a.max(b));
        (self.pair.get(&key).copied().unwrap_or(0.0) + self.smoothing) / self.windows
    }
}

/// `ln(P(a,b) / (P(a) P(b))) / -ln P(a,b)`, clamped to `[-1, 1]`.
/// Never co-occurring (or unseen) words score -1; words present in every
/// context score 1.
pub fn npmi_pair(reference: &dyn CoherenceReference, a: usize, b: usize) -> f64 {
    let (pa, pb, pab) = (reference.p_word(a), reference.p_word(b), reference.p_pair(a, b));
    if pa <= 0.0 || pb <= 0.0 || pab <= 0.0 {
        return -1.0;
    }
    let pab = pab.min(1.0);
    if pab >= 1.0 {
        return 1.0;
    }
    ((pab / (pa * pb)).ln() / -pab.ln()).clamp(-1.0, 1.0)
}

/// Mean over topics of the mean pairwise NPMI among each topic's first `k`
/// words.
pub fn npmi(topics: &[Vec<usize>], reference: &dyn CoherenceReference, k: usize) -> f64 {
    let mut per_topic = Vec::with_capacity(topics.len());
    for t in topics {
        let words = &t[..t.len().min(k)];
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..words.len() {
            for j in i + 1..words.len() {
                sum += npmi_pair(reference, words[i], words[j]);
                n += 1;
            }
        }
        if n > 0 {
            per_topic.push(sum / n as f64);
        }
    }
    if per_topic.is_empty() {
        0.0
    } else {
        per_topic.iter().sum::<f64>() / per_topic.len() as f64
    }
}

/// Per-word negative log-likelihood of bags of words under `dhat` rows.
/// Returns 0 when there are no words.
pub fn perplexity_exponent<R: AsRef<[f64]>>(dhat: &[R], counts: &[Vec<(usize, f64)>]) -> f64 {
    let mut nll = 0.0;
    let mut words = 0.0;
    for (row, bag) in dhat.iter().zip(counts) {
        let row = row.as_ref();
        for &(w, c) in bag {
            nll -= c * row[w].max(PROB_FLOOR).ln();
            words += c;
        }
    }
    if words == 0.0 {
        0.0
    } else {
        nll / words
    }
}

/// Probability that a positive outscores a negative; ties count one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Rank-sum with average ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Uniformly samples `count` distinct unlinked pairs among `nodes`.
pub fn sample_negative_pairs(
    nodes: &[usize],
    edges: &BTreeSet<(usize, usize)>,
    count: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let m = nodes.len();
    let possible = m * m.saturating_sub(1) / 2;
    let linked = nodes
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| nodes[i + 1..].iter().map(move |&b| (a.min(b), a.max(b))))
        .filter(|e| edges.contains(e))
        .count();
    let count = count.min(possible - linked);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeSet::new();
    let mut order = Vec::with_capacity(count);
    while out.len() < count {
        let a = nodes[rng.gen_range(0..m)];
        let b = nodes[rng.gen_range(0..m)];
        let e = (a.min(b), a.max(b));
        if a != b && !edges.contains(&e) && out.insert(e) {
            order.push(e);
        }
    }
    order
}

/// Link AUC of the score `-d^2` for positive vs. negative pairs of rows.
pub fn link_auc(embs: &[Vec<f64>], pos: &[(usize, usize)], neg: &[(usize, usize)], space: Space) -> f64 {
    let score = |&(a, b): &(usize, usize)| -sq_dist(space, &embs[a], &embs[b]);
    let p: Vec<f64> = pos.iter().map(score).collect();
    let n: Vec<f64> = neg.iter().map(score).collect();
    auc(&p, &n)
}

/// Top words of one topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicWords {
    pub id: usize,
    pub level: usize,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    pub npmi: f64,
    pub perplexity_exponent: f64,
    pub link_auc: Option<f64>,
    pub test_docs: usize,
    pub test_edges: usize,
    pub topics: Vec<TopicWords>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `metric<TAB>value` lines; absent metrics are omitted.
    pub fn to_table(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        let mut row = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push_str(&format!("{k}\t{v:.6}\n"));
            }
        };
        row("micro_f1", self.micro_f1);
        row("macro_f1", self.macro_f1);
        row("npmi", Some(self.npmi));
        row("perplexity_exponent", Some(self.perplexity_exponent));
        row("link_auc", self.link_auc);
        out
    }
}

/// Points on `H^{n,K}` from rows, for callers holding raw matrices.
pub fn rows_to_points(rows: &[Vec<f64>]) -> Vec<HyperPoint> {
    rows.iter()
        .map(|r| HyperPoint::from_coords_unchecked(r.clone()))
        .collect()
}

/// Default curvature space, for metric callers outside a model.
pub fn hyperbolic(k: f64) -> Space {
    Space::Hyperbolic(Curvature::new(k).expect("positive curvature"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn f1_examples() {
        assert_eq!(f1_scores(&[0, 1, 2], &[0, 1, 2]), (1.0, 1.0));
        let (mi, ma) = f1_scores(&[0, 0, 0, 0], &[0, 0, 1, 1]);
        assert_abs_diff_eq!(mi, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(ma, 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn auc_examples() {
        assert_abs_diff_eq!(auc(&[0.9, 0.7], &[0.8, 0.1]), 0.75, epsilon = 1e-15);
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]), 1.0);
        assert_eq!(auc(&[1.0], &[1.0]), 0.5);
    }

    #[test]
    fn perplexity_examples() {
        let u = vec![vec![0.25; 4]];
        assert_abs_diff_eq!(
            perplexity_exponent(&u, &[vec![(0, 2.0), (3, 5.0)]]),
            4f64.ln(),
            epsilon = 1e-12
        );
        let with_empty = vec![vec![0.25; 4], vec![0.25; 4]];
        assert_abs_diff_eq!(
            perplexity_exponent(&with_empty, &[vec![(0, 2.0), (3, 5.0)], vec![]]),
            4f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn knn_examples() {
        let s = hyperbolic(1.0);
        let o = HyperPoint::origin(2, Curvature::default()).into_coords();
        let far = geometry::exp0(
            &geometry::tangent_at_origin(&[2.0, 0.0], Curvature::default()),
            Curvature::default(),
        )
        .into_coords();
        assert_eq!(
            knn_classify(
                std::slice::from_ref(&o),
                &[4],
                &[far.clone(), o.clone()],
                5,
                s,
                Exec::Sequential
            ),
            vec![4, 4]
        );
        assert_eq!(
            knn_classify(
                &[o.clone(), far.clone()],
                &[1, 0],
                std::slice::from_ref(&far),
                1,
                s,
                Exec::Sequential
            ),
            vec![0]
        );
        // One vote each: the closer voter wins.
        assert_eq!(
            knn_classify(
                &[o.clone(), far.clone()],
                &[1, 0],
                std::slice::from_ref(&o),
                2,
                s,
                Exec::Sequential
            ),
            vec![1]
        );
    }

    #[test]
    fn npmi_bounds() {
        // Words 0 and 1 always appear together; word 2 appears alone.
        let docs = vec![vec![0, 1], vec![2], vec![0, 1], vec![2]];
        let r = WindowReference::build(&docs, 10, 0.0, None);
        assert_abs_diff_eq!(npmi_pair(&r, 0, 1), 1.0, epsilon = 1e-12);
        assert_eq!(npmi_pair(&r, 0, 2), -1.0);
        assert_abs_diff_eq!(npmi(&[vec![0, 1]], &r, 10), 1.0, epsilon = 1e-12);
    }
}
