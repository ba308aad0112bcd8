//! Hyperbolic graph attention over sampled document neighborhoods.

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// `W_g` is `(n+1) x (n+1)`, `b_att` is `1 x 2(n+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphParams {
    pub w_g: ParamId,
    pub b_att: ParamId,
}

/// `exp_0(log_0(d) W_g)` for every row.
pub fn transform<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, p: GraphParams, d: Var) -> Var {
    let w = tape.param(store, p.w_g);
    let l = tape.log0(d);
    let proj = tape.matmul(l, w);
    tape.exp0(proj)
}

/// Graph embedding of every row of `d`:
/// `g_i = exp_0(1/2 (u_i + sum_j alpha_ij u_j))` with `u = log_0(transform(d))`
/// and `neighbors[i]` indexing rows of `d`. An empty neighborhood yields
/// `exp_0(u_i / 2)`.
pub fn graph_embeddings<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    p: GraphParams,
    d: Var,
    neighbors: Vec<Vec<usize>>,
) -> Var {
    let dt = transform(tape, store, p, d);
    let u = tape.log0(dt);
    let b = tape.param(store, p.b_att);
    let agg = tape.neighbor_aggregate(u, b, neighbors);
    tape.exp0(agg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    use crate::geometry::Curvature;
    use crate::tape::Space;

    fn setup(w: Array2<f64>) -> (ParamStore, GraphParams) {
        let mut s = ParamStore::new();
        let n1 = w.nrows();
        let p = GraphParams {
            w_g: s.insert("w", w),
            b_att: s.insert("b", Array2::from_shape_fn((1, 2 * n1), |(_, j)| 0.3 * (j as f64).cos())),
        };
        (s, p)
    }

    fn points(tape: &mut Tape<'_>, rows: Vec<Vec<f64>>) -> Var {
        let n = rows[0].len();
        let m = Array2::from_shape_vec((rows.len(), n), rows.concat()).unwrap();
        let v = tape.constant(m);
        tape.exp0(v)
    }

    #[test]
    fn identity_transform_and_self_neighbor() {
        let (store, p) = setup(Array2::eye(3));
        let mut tape = Tape::new(Space::Hyperbolic(Curvature::default()));
        let d = points(&mut tape, vec![vec![0.0, 0.4, -0.9], vec![0.0, 0.4, -0.9]]);
        let dt = transform(&mut tape, &store, p, d);
        for (a, b) in tape.value(dt).iter().zip(tape.value(d).iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
        let g = graph_embeddings(&mut tape, &store, p, d, vec![vec![1], vec![]]);
        // A neighbor equal to the center gives back the center.
        for (a, b) in tape.value(g).row(0).iter().zip(tape.value(d).row(0).iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
        // The empty neighborhood halves the tangent vector.
        let half = points(&mut tape, vec![vec![0.0, 0.2, -0.45]]);
        for (a, b) in tape.value(g).row(1).iter().zip(tape.value(half).row(0).iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let w = Array2::from_shape_fn((3, 3), |(i, j)| ((i + 2 * j) as f64).sin());
        let (store, p) = setup(w);
        let mut tape = Tape::new(Space::Hyperbolic(Curvature::default()));
        let d = points(
            &mut tape,
            vec![
                vec![0.0, 0.1, 0.2],
                vec![0.0, -0.5, 0.3],
                vec![0.0, 0.9, 0.1],
                vec![0.0, 0.2, -0.7],
            ],
        );
        let a = graph_embeddings(&mut tape, &store, p, d, vec![vec![1, 2, 3], vec![], vec![], vec![]]);
        let b = graph_embeddings(&mut tape, &store, p, d, vec![vec![3, 1, 2], vec![], vec![], vec![]]);
        for (x, y) in tape.value(a).row(0).iter().zip(tape.value(b).row(0).iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }
}
