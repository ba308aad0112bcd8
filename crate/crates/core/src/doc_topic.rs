//! Per-document path, level and topic distributions and the tree embedding.
//!
//! Every per-topic vector uses the breadth-first column order of
//! [`TreeLayout`]. The tape builders here are what the model runs; the
//! plain functions mirror them on scalars for callers and oracles.

use std::collections::HashMap;

use crate::geometry::{self, Curvature, HyperPoint};
use crate::tape::{Tape, Var};
use crate::tree::{TopicId, TopicTree};

/// Column bookkeeping derived from a [`TopicTree`].
#[derive(Debug, Clone, PartialEq)]
pub struct TreeLayout {
    /// Topic id of each column (breadth-first).
    pub order: Vec<TopicId>,
    pub col: HashMap<TopicId, usize>,
    pub parent: Vec<Option<usize>>,
    pub left_sibling: Vec<Option<usize>>,
    /// Child columns of every non-leaf, in stick-breaking order.
    pub groups: Vec<Vec<usize>>,
    /// 0-based level of each column.
    pub level: Vec<usize>,
    /// Leaf columns in path-enumeration order.
    pub leaves: Vec<usize>,
    pub depth: usize,
}

impl TreeLayout {
    pub fn new(tree: &TopicTree) -> Self {
        let order = tree.bfs_order();
        let col: HashMap<TopicId, usize> = order.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut parent = Vec::with_capacity(order.len());
        let mut left_sibling = Vec::with_capacity(order.len());
        let mut level = Vec::with_capacity(order.len());
        let mut groups = Vec::new();
        for &t in &order {
            let node = tree.node(t).expect("bfs ids exist");
            parent.push(node.parent.map(|p| col[&p]));
            left_sibling.push(tree.left_sibling(t).map(|s| col[&s]));
            level.push(node.level - 1);
            if !node.children.is_empty() {
                groups.push(node.children.iter().map(|c| col[c]).collect());
            }
        }
        let leaves = tree
            .enumerate_paths()
            .iter()
            .map(|p| col[p.0.last().expect("non-empty path")])
            .collect();
        Self {
            order,
            col,
            parent,
            left_sibling,
            groups,
            level,
            leaves,
            depth: tree.depth(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Tape handles for a batch of documents' distributions.
#[derive(Debug, Clone, Copy)]
pub struct TopicOutputs {
    /// `m x T`, breadth-first columns.
    pub theta: Var,
    /// `m x paths`.
    pub pi: Var,
    /// `m x H`.
    pub delta: Var,
    /// `m x (n+1)` tree embeddings.
    pub e: Var,
}

/// Fermi-Dirac similarity `1 / (1 + exp(d^2))` for every document/topic pair.
pub fn fermi_dirac_matrix(tape: &mut Tape<'_>, docs: Var, points: Var) -> Var {
    let d2 = tape.sq_dist_matrix(docs, points);
    let neg = tape.scale(d2, -1.0);
    tape.sigmoid(neg)
}

/// Distributions and tree embedding for document points `docs` given topic
/// points `z` (`T x (n+1)`) and level points `zl` (`H x (n+1)`).
pub fn doc_topics(tape: &mut Tape<'_>, docs: Var, z: Var, zl: Var, layout: &TreeLayout) -> TopicOutputs {
    let sig = fermi_dirac_matrix(tape, docs, z);
    let cond = tape.stick_break(sig, layout.groups.clone());
    let reach = tape.tree_reach(cond, layout.parent.clone());
    let pi = tape.gather_cols(reach, &layout.leaves);

    let sig_l = fermi_dirac_matrix(tape, docs, zl);
    let delta = tape.stick_break(sig_l, vec![(0..layout.depth).collect()]);
    let delta_t = tape.gather_cols(delta, &layout.level);
    let theta = tape.mul(reach, delta_t);

    let e = tree_embedding_var(tape, theta, z);
    TopicOutputs { theta, pi, delta, e }
}

/// `exp_0(theta . log_0(Z))`.
pub fn tree_embedding_var(tape: &mut Tape<'_>, theta: Var, z: Var) -> Var {
    let lz = tape.log0(z);
    let mix = tape.matmul(theta, lz);
    tape.exp0(mix)
}

/// Stick-breaking over one ordered group; the last entry is the residual.
pub fn stick_breaking(sigmas: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sigmas.len());
    let mut rem = 1.0;
    for (i, &s) in sigmas.iter().enumerate() {
        if i + 1 == sigmas.len() {
            out.push(rem);
        } else {
            out.push(s * rem);
            rem *= 1.0 - s;
        }
    }
    out
}

/// Conditional child probabilities from the children's Fermi-Dirac values.
pub fn child_selection_probs(child_sigmas: &[f64]) -> Vec<f64> {
    stick_breaking(child_sigmas)
}

/// Level distribution from the `H` level similarities (the last one is
/// unused: the deepest level takes the residual).
pub fn level_distribution(level_sigmas: &[f64]) -> Vec<f64> {
    stick_breaking(level_sigmas)
}

/// Path distribution from per-topic similarities in breadth-first order.
pub fn path_distribution(sigma: &[f64], layout: &TreeLayout) -> Vec<f64> {
    let r = reach(sigma, layout);
    layout.leaves.iter().map(|&c| r[c]).collect()
}

/// `theta_t = delta(level t) * sum of pi over the paths through t`.
pub fn topic_distribution(pi: &[f64], delta: &[f64], layout: &TreeLayout) -> Vec<f64> {
    let mut through = vec![0.0; layout.len()];
    for (p, &leaf) in layout.leaves.iter().enumerate() {
        let mut c = Some(leaf);
        while let Some(col) = c {
            through[col] += pi[p];
            c = layout.parent[col];
        }
    }
    through
        .iter()
        .enumerate()
        .map(|(c, m)| delta[layout.level[c]] * m)
        .collect()
}

/// `exp_0(sum_t theta_t log_0(z_t))`.
pub fn tree_embedding(theta: &[f64], topics: &[HyperPoint], k: Curvature) -> HyperPoint {
    let n1 = topics[0].coords().len();
    let mut acc = vec![0.0; n1];
    for (w, z) in theta.iter().zip(topics) {
        let l = geometry::log0(z, k);
        for (a, v) in acc.iter_mut().zip(l.coords()) {
            *a += w * v;
        }
    }
    geometry::exp0(&geometry::tangent_at_origin(&acc[1..], k), k)
}

fn reach(sigma: &[f64], layout: &TreeLayout) -> Vec<f64> {
    let mut cond = vec![1.0; layout.len()];
    for g in &layout.groups {
        let s: Vec<f64> = g.iter().map(|&c| sigma[c]).collect();
        for (&c, p) in g.iter().zip(stick_breaking(&s)) {
            cond[c] = p;
        }
    }
    let mut r = cond;
    for c in 0..layout.len() {
        if let Some(p) = layout.parent[c] {
            r[c] *= r[p];
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    use crate::tape::Space;

    #[test]
    fn three_child_stick() {
        let p = child_selection_probs(&[0.5, 0.5, 0.9]);
        assert_eq!(p, vec![0.5, 0.25, 0.25]);
        assert_eq!(child_selection_probs(&[0.3]), vec![1.0]);
    }

    #[test]
    fn level_examples() {
        assert_eq!(level_distribution(&[0.4]), vec![1.0]);
        let d = level_distribution(&[0.3, 0.1]);
        assert_abs_diff_eq!(d[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 0.7, epsilon = 1e-15);
        assert_eq!(level_distribution(&[0.5, 0.5, 0.2]), vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn theta_hand_summation() {
        let tree = TopicTree::init(2, 2).unwrap();
        let layout = TreeLayout::new(&tree);
        let theta = topic_distribution(&[0.6, 0.4], &[0.5, 0.5], &layout);
        assert_abs_diff_eq!(theta[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(theta[1], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(theta[2], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn path_distribution_root_split() {
        let tree = TopicTree::init(2, 3).unwrap();
        let layout = TreeLayout::new(&tree);
        let pi = path_distribution(&[0.5, 0.5, 0.5, 0.1], &layout);
        assert_eq!(pi, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn layout_of_complete_tree() {
        let tree = TopicTree::init(3, 2).unwrap();
        let l = TreeLayout::new(&tree);
        assert_eq!(l.len(), 7);
        assert_eq!(l.parent[0], None);
        assert_eq!(l.groups[0], vec![1, 2]);
        assert_eq!(l.level, vec![0, 1, 1, 2, 2, 2, 2]);
        assert_eq!(l.leaves, vec![3, 4, 5, 6]);
        assert_eq!(l.left_sibling[2], Some(1));
    }

    #[test]
    fn tape_matches_scalar_path() {
        let k = Curvature::default();
        let tree = TopicTree::init(3, 2).unwrap();
        let layout = TreeLayout::new(&tree);
        let doc = Array2::from_shape_vec((1, 3), vec![0.0, 0.3, -0.2]).unwrap();
        let z = Array2::from_shape_fn(
            (7, 3),
            |(i, j)| if j == 0 { 0.0 } else { 0.1 * (i as f64) - 0.2 * j as f64 },
        );
        let zl = Array2::from_shape_fn(
            (3, 3),
            |(i, j)| if j == 0 { 0.0 } else { 0.2 * i as f64 + 0.05 * j as f64 },
        );
        let mut tape = Tape::new(Space::Hyperbolic(k));
        let (dv, zv, zlv) = (tape.constant(doc), tape.constant(z), tape.constant(zl));
        let (dp, zp, zlp) = (tape.exp0(dv), tape.exp0(zv), tape.exp0(zlv));
        let out = doc_topics(&mut tape, dp, zp, zlp, &layout);

        let d = HyperPoint::from_coords_unchecked(tape.value(dp).row(0).to_vec());
        let pts = |v: Var, t: &Tape| -> Vec<HyperPoint> {
            t.value(v)
                .rows()
                .into_iter()
                .map(|r| HyperPoint::from_coords_unchecked(r.to_vec()))
                .collect()
        };
        let sig: Vec<f64> = pts(zp, &tape)
            .iter()
            .map(|z| 1.0 / (1.0 + geometry::sq_distance(&d, z, k).exp()))
            .collect();
        let sig_l: Vec<f64> = pts(zlp, &tape)
            .iter()
            .map(|z| 1.0 / (1.0 + geometry::sq_distance(&d, z, k).exp()))
            .collect();
        let pi = path_distribution(&sig, &layout);
        let delta = level_distribution(&sig_l);
        let theta = topic_distribution(&pi, &delta, &layout);
        for (a, b) in tape.value(out.theta).row(0).iter().zip(&theta) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        for (a, b) in tape.value(out.pi).row(0).iter().zip(&pi) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(theta.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let e = tree_embedding(&theta, &pts(zp, &tape), k);
        for (a, b) in tape.value(out.e).row(0).iter().zip(e.coords()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
        }
    }

    #[test]
    fn one_hot_tree_embedding_is_the_topic() {
        let k = Curvature::new(2.0).unwrap();
        let z = geometry::exp0(&geometry::tangent_at_origin(&[0.4, -1.2], k), k);
        let other = HyperPoint::origin(2, k);
        let e = tree_embedding(&[0.0, 1.0], &[other, z.clone()], k);
        for (a, b) in e.coords().iter().zip(z.coords()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }
}
