//! Hyperbolic RNN cell and the doubly recurrent (ancestral + fraternal)
//! network that turns a topic tree into per-topic and per-level points.

use ndarray::Array2;

use crate::doc_topic::TreeLayout;
use crate::geometry::{Curvature, HyperPoint};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Space, Tape, Var};

/// `W` is `(n+1) x (n+1)`, `b` is a `1 x n` Euclidean bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RnnParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrnnParams {
    pub ancestral: RnnParams,
    pub fraternal: RnnParams,
    pub combine_w: ParamId,
    /// `1 x n` tangent coordinates of the shared seed point.
    pub init_state: ParamId,
}

/// `f_tanh(exp_{z'}(PT_{0->z'}([0 || b])))` with `z' = exp_0(log_0(z) W)`,
/// applied to every row of `z`.
pub fn rnn_step<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, p: RnnParams, z: Var) -> Var {
    let w = tape.param(store, p.w);
    let b = tape.param(store, p.b);
    let u = tape.log0(z);
    let proj = tape.matmul(u, w);
    let zp = tape.exp0(proj);
    let bt = tape.transport_origin(zp, b);
    let moved = tape.exp_at(zp, bt);
    hyp_tanh(tape, moved)
}

/// `f_tanh(exp_0((log_0 z_p + log_0 z_s) W))`.
pub fn combine<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, w: ParamId, zp: Var, zs: Var) -> Var {
    let w = tape.param(store, w);
    let a = tape.log0(zp);
    let b = tape.log0(zs);
    let sum = tape.add(a, b);
    let proj = tape.matmul(sum, w);
    let x = tape.exp0(proj);
    hyp_tanh(tape, x)
}

/// `exp_0(tanh(log_0 x))`.
pub fn hyp_tanh(tape: &mut Tape<'_>, x: Var) -> Var {
    let l = tape.log0(x);
    let t = tape.tanh(l);
    tape.exp0(t)
}

/// The shared seed point `exp_0([0 || init_state])`.
pub fn seed_point<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, init_state: ParamId) -> Var {
    let s = tape.param(store, init_state);
    let lifted = tape.lift(s);
    tape.exp0(lifted)
}

/// Topic points in the layout's breadth-first order, `T x (n+1)`.
///
/// The root and first children read the seed point in place of the
/// missing parent / left sibling.
pub fn topic_embeddings<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, p: DrnnParams, layout: &TreeLayout) -> Var {
    let seed = seed_point(tape, store, p.init_state);
    let mut rows: Vec<Var> = Vec::with_capacity(layout.len());
    for c in 0..layout.len() {
        let parent_in = layout.parent[c].map_or(seed, |q| rows[q]);
        let sibling_in = layout.left_sibling[c].map_or(seed, |q| rows[q]);
        let zp = rnn_step(tape, store, p.ancestral, parent_in);
        let zs = rnn_step(tape, store, p.fraternal, sibling_in);
        rows.push(combine(tape, store, p.combine_w, zp, zs));
    }
    tape.concat_rows(&rows)
}

/// Level chain `z_1 = rnn(seed)`, `z_h = rnn(z_{h-1})`, `H x (n+1)`.
pub fn level_embeddings<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    p: RnnParams,
    init_state: ParamId,
    depth: usize,
) -> Var {
    let mut z = seed_point(tape, store, init_state);
    let mut rows = Vec::with_capacity(depth);
    for _ in 0..depth {
        z = rnn_step(tape, store, p, z);
        rows.push(z);
    }
    tape.concat_rows(&rows)
}

/// One RNN step on a single point with explicit weights.
pub fn hyp_rnn_step(z: &HyperPoint, w: &Array2<f64>, b: &[f64], k: Curvature) -> HyperPoint {
    let mut store = ParamStore::new();
    let p = RnnParams {
        w: store.insert("w", w.clone()),
        b: store.insert("b", Array2::from_shape_vec((1, b.len()), b.to_vec()).expect("bias row")),
    };
    let mut tape = Tape::new(Space::Hyperbolic(k));
    let zv = tape.constant(row(z));
    let out = rnn_step(&mut tape, &store, p, zv);
    HyperPoint::from_coords_unchecked(tape.value(out).row(0).to_vec())
}

/// One combine step on explicit points.
pub fn hyp_drnn_combine(zp: &HyperPoint, zs: &HyperPoint, w: &Array2<f64>, k: Curvature) -> HyperPoint {
    let mut store = ParamStore::new();
    let wid = store.insert("w", w.clone());
    let mut tape = Tape::new(Space::Hyperbolic(k));
    let a = tape.constant(row(zp));
    let b = tape.constant(row(zs));
    let out = combine(&mut tape, &store, wid, a, b);
    HyperPoint::from_coords_unchecked(tape.value(out).row(0).to_vec())
}

/// `1 / (1 + exp(d_L(z, d)^2))`.
pub fn fermi_dirac(z: &HyperPoint, d: &HyperPoint, k: Curvature) -> f64 {
    1.0 / (1.0 + crate::geometry::sq_distance(z, d, k).exp())
}

fn row(p: &HyperPoint) -> Array2<f64> {
    Array2::from_shape_vec((1, p.coords().len()), p.coords().to_vec()).expect("row")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    use crate::geometry::{self, hyp_activation};
    use crate::tree::TopicTree;

    fn k1() -> Curvature {
        Curvature::default()
    }

    fn point(v: &[f64], k: Curvature) -> HyperPoint {
        geometry::exp0(&geometry::tangent_at_origin(v, k), k)
    }

    #[test]
    fn origin_is_fixed_without_bias() {
        let k = k1();
        let w = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.3);
        let out = hyp_rnn_step(&HyperPoint::origin(2, k), &w, &[0.0, 0.0], k);
        for (a, b) in out.coords().iter().zip(HyperPoint::origin(2, k).coords()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_weights_reduce_to_activation() {
        let k = Curvature::new(0.5).unwrap();
        let z = point(&[0.7, -0.4, 1.1], k);
        let out = hyp_rnn_step(&z, &Array2::eye(4), &[0.0; 3], k);
        let expect = hyp_activation(&z, f64::tanh, k);
        for (a, b) in out.coords().iter().zip(expect.coords()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        let c = hyp_drnn_combine(&z, &HyperPoint::origin(3, k), &Array2::eye(4), k);
        for (a, b) in c.coords().iter().zip(expect.coords()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn biased_step_stays_on_manifold() {
        let k = Curvature::new(2.0).unwrap();
        let z = point(&[1.5, -0.3], k);
        let w = Array2::from_shape_fn((3, 3), |(i, j)| ((i + 2 * j) as f64).sin());
        let out = hyp_rnn_step(&z, &w, &[0.8, -1.3], k);
        assert!(out.membership_error(k) < 1e-9);
        assert!(out.coords()[0] > 0.0);
    }

    #[test]
    fn fermi_dirac_values() {
        let k = k1();
        let o = HyperPoint::origin(1, k);
        assert_abs_diff_eq!(fermi_dirac(&o, &o, k), 0.5, epsilon = 1e-15);
        let p = point(&[1.0], k);
        assert_abs_diff_eq!(fermi_dirac(&o, &p, k), 0.268941421369995, epsilon = 1e-9);
        assert_abs_diff_eq!(fermi_dirac(&p, &o, k), fermi_dirac(&o, &p, k), epsilon = 1e-15);
    }

    fn drnn_store(n: usize) -> (ParamStore, DrnnParams, RnnParams) {
        let mut s = ParamStore::new();
        let m = |r: usize, c: usize, off: f64| {
            Array2::from_shape_fn((r, c), |(i, j)| ((i * 7 + j * 3) as f64 + off).sin() * 0.4)
        };
        let p = DrnnParams {
            ancestral: RnnParams {
                w: s.insert("aw", m(n + 1, n + 1, 0.1)),
                b: s.insert("ab", m(1, n, 0.2)),
            },
            fraternal: RnnParams {
                w: s.insert("fw", m(n + 1, n + 1, 0.3)),
                b: s.insert("fb", m(1, n, 0.4)),
            },
            combine_w: s.insert("cw", m(n + 1, n + 1, 0.5)),
            init_state: s.insert("init", m(1, n, 0.6)),
        };
        let lv = RnnParams {
            w: s.insert("lw", m(n + 1, n + 1, 0.7)),
            b: s.insert("lb", m(1, n, 0.8)),
        };
        (s, p, lv)
    }

    #[test]
    fn fraternal_chain_unrolled_by_hand() {
        let k = k1();
        let n = 3;
        let (store, p, _) = drnn_store(n);
        let tree = TopicTree::init(2, 2).unwrap();
        let layout = TreeLayout::new(&tree);
        let mut tape = Tape::new(Space::Hyperbolic(k));
        let z = topic_embeddings(&mut tape, &store, p, &layout);
        let zv = tape.value(z).clone();

        let get = |id| store.value(id).clone();
        let brow = |id| store.value(id).row(0).to_vec();
        let seed = point(&brow(p.init_state), k);
        let anc = |x: &HyperPoint| hyp_rnn_step(x, &get(p.ancestral.w), &brow(p.ancestral.b), k);
        let fra = |x: &HyperPoint| hyp_rnn_step(x, &get(p.fraternal.w), &brow(p.fraternal.b), k);
        let comb = |a: &HyperPoint, b: &HyperPoint| hyp_drnn_combine(a, b, &get(p.combine_w), k);
        let root = comb(&anc(&seed), &fra(&seed));
        let first = comb(&anc(&root), &fra(&seed));
        let second = comb(&anc(&root), &fra(&first));
        for (r, pnt) in [&root, &first, &second].iter().enumerate() {
            for (a, b) in zv.row(r).iter().zip(pnt.coords()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
        // The second child depends on the first one.
        let alt = comb(&anc(&root), &fra(&seed));
        assert!((alt.coords()[1] - second.coords()[1]).abs() > 1e-6);
    }

    #[test]
    fn level_chain_and_determinism() {
        let k = k1();
        let (store, p, lv) = drnn_store(4);
        let run = || {
            let mut tape = Tape::new(Space::Hyperbolic(k));
            let z = level_embeddings(&mut tape, &store, lv, p.init_state, 3);
            tape.value(z).clone()
        };
        let a = run();
        assert_eq!(a.nrows(), 3);
        for r in a.rows() {
            let pnt = HyperPoint::from_coords_unchecked(r.to_vec());
            assert!(pnt.membership_error(k) < 1e-9);
        }
        assert_eq!(a, run());
    }

    #[test]
    fn disjoint_subtree_edit_leaves_node_unchanged() {
        let k = k1();
        let (store, p, _) = drnn_store(3);
        let mut tree = TopicTree::init(3, 2).unwrap();
        let before = {
            let layout = TreeLayout::new(&tree);
            let mut tape = Tape::new(Space::Hyperbolic(k));
            let z = topic_embeddings(&mut tape, &store, p, &layout);
            (layout.col[&3], tape.value(z).row(layout.col[&3]).to_vec())
        };
        // Give topic 2 (right subtree) a third child; topic 3 sits under 1.
        let mut mass = std::collections::HashMap::new();
        for n in tree.nodes() {
            mass.insert(n.id, if n.id == 2 { 0.5 } else { 0.06 });
        }
        mass.insert(0, 0.0);
        mass.insert(1, 0.0);
        let log = tree.update(&mass, 0.1, 0.01);
        assert_eq!(log.added.len(), 1);
        let layout = TreeLayout::new(&tree);
        let mut tape = Tape::new(Space::Hyperbolic(k));
        let z = topic_embeddings(&mut tape, &store, p, &layout);
        assert_eq!(tape.value(z).row(layout.col[&3]).to_vec(), before.1);
    }
}
