//! Hyperbolic Transformer layers over packed document sequences.
//!
//! Documents are packed row-wise: document `i` occupies rows
//! `offsets[i] .. offsets[i] + lens[i]` with its `[CLS]` token first.
//! Attention runs per document segment, so no padding is ever materialised.

use crate::params::{ParamId, ParamStore};
use crate::tape::{Segment, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// `(heads * head_dim) x (n+1)`.
    pub wo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub c1: ParamId,
    pub w2: ParamId,
    pub c2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedParams {
    /// `|V| x n`.
    pub tokens: ParamId,
    /// `1 x n`.
    pub cls: ParamId,
    /// `(max_len + 1) x n`.
    pub positions: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub count: usize,
    pub dim: usize,
}

impl Heads {
    /// Splits `n + 1` tangent columns into `count` heads of equal width.
    pub fn new(ambient: usize, count: usize) -> Self {
        Self {
            count,
            dim: (ambient / count).max(1),
        }
    }

    pub fn width(self) -> usize {
        self.count * self.dim
    }
}

/// Row layout of a packed batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Packed {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Packed {
    pub fn new(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        Self { offsets, lens }
    }

    pub fn docs(&self) -> usize {
        self.lens.len()
    }

    pub fn rows(&self) -> usize {
        self.lens.iter().sum()
    }

    /// Row index of every document's `[CLS]` token.
    pub fn cls_rows(&self) -> Vec<usize> {
        self.offsets.clone()
    }
}

/// `[CLS] + tokens` with learned positions, lifted and mapped by `exp_0`.
/// Documents must already be truncated to the position table.
pub fn embed<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, p: EmbedParams, docs: &[&[usize]]) -> (Var, Packed) {
    let packed = Packed::new(docs.iter().map(|d| d.len() + 1).collect());
    let mut tok_idx = Vec::with_capacity(packed.rows());
    let mut pos_idx = Vec::with_capacity(packed.rows());
    for d in docs {
        tok_idx.push(0);
        pos_idx.push(0);
        for (i, &w) in d.iter().enumerate() {
            tok_idx.push(w + 1);
            pos_idx.push(i + 1);
        }
    }
    let cls = tape.param(store, p.cls);
    let table = tape.param(store, p.tokens);
    let all = tape.concat_rows(&[cls, table]);
    let toks = tape.gather_rows(all, &tok_idx);
    let pos_table = tape.param(store, p.positions);
    let pos = tape.gather_rows(pos_table, &pos_idx);
    let sum = tape.add(toks, pos);
    let lifted = tape.lift(sum);
    (tape.exp0(lifted), packed)
}

/// `log_0(exp_0(x W))`: a hyperbolic linear map read back in tangent space.
fn hyp_linear(tape: &mut Tape<'_>, x: Var, w: Var) -> Var {
    let y = tape.matmul(x, w);
    let p = tape.exp0(y);
    tape.log0(p)
}

/// One layer. `extras` are per-document points (`docs x (n+1)` each) that
/// are prepended to the keys and values of their document but never queried.
pub fn layer<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    p: &LayerParams,
    heads: Heads,
    x: Var,
    packed: &Packed,
    extras: &[Var],
) -> Var {
    let m = packed.docs();
    let th = tape.log0(x);

    let (kv, segments) = if extras.is_empty() {
        let segs = (0..m)
            .map(|i| Segment {
                q_start: packed.offsets[i],
                q_len: packed.lens[i],
                k_start: packed.offsets[i],
                k_len: packed.lens[i],
            })
            .collect();
        (th, segs)
    } else {
        let ne = extras.len();
        let mut parts: Vec<Var> = extras.iter().map(|&e| tape.log0(e)).collect();
        parts.push(th);
        let stacked = tape.concat_rows(&parts);
        let mut idx = Vec::with_capacity(packed.rows() + ne * m);
        let mut segs = Vec::with_capacity(m);
        for i in 0..m {
            let k_start = idx.len();
            for j in 0..ne {
                idx.push(j * m + i);
            }
            idx.extend((0..packed.lens[i]).map(|r| ne * m + packed.offsets[i] + r));
            segs.push(Segment {
                q_start: packed.offsets[i],
                q_len: packed.lens[i],
                k_start,
                k_len: packed.lens[i] + ne,
            });
        }
        (tape.gather_rows(stacked, &idx), segs)
    };

    let (wq, wk, wv, wo) = (
        tape.param(store, p.wq),
        tape.param(store, p.wk),
        tape.param(store, p.wv),
        tape.param(store, p.wo),
    );
    let q = hyp_linear(tape, th, wq);
    let k = hyp_linear(tape, kv, wk);
    let v = hyp_linear(tape, kv, wv);
    let ambient = tape.value(x).ncols();
    let scale = 1.0 / (ambient as f64).sqrt();
    let att = tape.attention(q, k, v, segments, heads.count, heads.dim, scale);
    let o = hyp_linear(tape, att, wo);

    let res1 = tape.add(th, o);
    let (g1, b1) = (tape.param(store, p.ln1_gain), tape.param(store, p.ln1_bias));
    let h1 = tape.layer_norm(res1, g1, b1);

    let (w1, c1, w2, c2) = (
        tape.param(store, p.w1),
        tape.param(store, p.c1),
        tape.param(store, p.w2),
        tape.param(store, p.c2),
    );
    let a = tape.matmul(h1, w1);
    let a = tape.add_row(a, c1);
    let a = tape.gelu(a);
    let a = tape.matmul(a, w2);
    let mlp = tape.add_row(a, c2);
    let res2 = tape.add(h1, mlp);
    let (g2, b2) = (tape.param(store, p.ln2_gain), tape.param(store, p.ln2_bias));
    let h2 = tape.layer_norm(res2, g2, b2);
    tape.exp0(h2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    use crate::geometry::{Curvature, HyperPoint};
    use crate::tape::Space;

    fn store(n: usize, vocab: usize, heads: Heads) -> (ParamStore, EmbedParams, LayerParams) {
        let n1 = n + 1;
        let mut s = ParamStore::new();
        let f = |r: usize, c: usize, o: f64| {
            Array2::from_shape_fn((r, c), |(i, j)| ((i * 5 + j * 3) as f64 * 0.37 + o).sin() * 0.3)
        };
        let e = EmbedParams {
            tokens: s.insert("tok", f(vocab, n, 0.1)),
            cls: s.insert("cls", f(1, n, 0.2)),
            positions: s.insert("pos", f(8, n, 0.3)),
        };
        let l = LayerParams {
            wq: s.insert("wq", f(n1, n1, 0.4)),
            wk: s.insert("wk", f(n1, n1, 0.5)),
            wv: s.insert("wv", f(n1, n1, 0.6)),
            wo: s.insert("wo", f(heads.width(), n1, 0.7)),
            ln1_gain: s.insert("g1", Array2::ones((1, n))),
            ln1_bias: s.insert("b1", Array2::zeros((1, n))),
            w1: s.insert("w1", f(n1, 2 * n1, 0.8)),
            c1: s.insert("c1", f(1, 2 * n1, 0.9)),
            w2: s.insert("w2", f(2 * n1, n1, 1.0)),
            c2: s.insert("c2", f(1, n1, 1.1)),
            ln2_gain: s.insert("g2", Array2::ones((1, n))),
            ln2_bias: s.insert("b2", Array2::zeros((1, n))),
        };
        (s, e, l)
    }

    #[test]
    fn embedding_shapes_and_membership() {
        let k = Curvature::default();
        let heads = Heads::new(4, 2);
        let (s, e, _) = store(3, 6, heads);
        let mut tape = Tape::new(Space::Hyperbolic(k));
        let docs: Vec<&[usize]> = vec![&[1, 2, 3], &[], &[5]];
        let (x, packed) = embed(&mut tape, &s, e, &docs);
        assert_eq!(packed.lens, vec![4, 1, 2]);
        assert_eq!(packed.cls_rows(), vec![0, 4, 5]);
        for r in tape.value(x).rows() {
            assert!(HyperPoint::from_coords_unchecked(r.to_vec()).membership_error(k) < 1e-9);
        }
    }

    #[test]
    fn zero_embedding_is_origin() {
        let mut s = ParamStore::new();
        let e = EmbedParams {
            tokens: s.insert("tok", Array2::zeros((2, 2))),
            cls: s.insert("cls", Array2::zeros((1, 2))),
            positions: s.insert("pos", Array2::zeros((3, 2))),
        };
        let mut tape = Tape::new(Space::Hyperbolic(Curvature::default()));
        let (x, _) = embed(&mut tape, &s, e, &[&[0, 1]]);
        for r in tape.value(x).rows() {
            assert_eq!(r.to_vec(), vec![1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn layer_preserves_rows_and_ignores_other_documents() {
        let k = Curvature::default();
        let heads = Heads::new(4, 2);
        let (s, e, l) = store(3, 6, heads);
        let run = |docs: Vec<&[usize]>, extra_rows: Option<Array2<f64>>| {
            let mut tape = Tape::new(Space::Hyperbolic(k));
            let (x, packed) = embed(&mut tape, &s, e, &docs);
            let extras = match extra_rows {
                Some(m) => {
                    let c = tape.constant(m);
                    vec![tape.exp0(c)]
                }
                None => vec![],
            };
            let y = layer(&mut tape, &s, &l, heads, x, &packed, &extras);
            tape.value(y).clone()
        };
        let both = run(vec![&[1, 2, 3], &[4, 0]], None);
        let alone = run(vec![&[1, 2, 3]], None);
        assert_eq!(both.nrows(), 7);
        for (a, b) in both.rows().into_iter().take(4).zip(alone.rows()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
            }
        }
        for r in both.rows() {
            assert!(HyperPoint::from_coords_unchecked(r.to_vec()).membership_error(k) < 1e-9);
        }
        // An injected key/value token changes the output but not its length.
        let inj = Array2::from_shape_vec((1, 4), vec![0.0, 0.9, -0.4, 0.3]).unwrap();
        let injected = run(vec![&[1, 2, 3]], Some(inj));
        assert_eq!(injected.nrows(), 4);
        assert!((&injected - &alone).iter().any(|d| d.abs() > 1e-6));
    }
}
