//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly: values are computed when a
//! node is pushed and [`Tape::backward`] walks the nodes in reverse. Besides
//! the usual linear-algebra primitives, the tape carries fused row-wise
//! hyperbolic operators (`exp_0`, `log_0`, `exp_x`, transport from the
//! origin, squared geodesic distance) with hand-derived backward passes that
//! stay finite at the zero and coincident limits.
//!
//! Hyperbolic operators dispatch on [`Space`]; in [`Space::Euclidean`] they
//! degrade to their flat counterparts, which backs the Euclidean ablation.

use std::borrow::Cow;
use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView1, Axis};

use crate::geometry::{arcosh_one_plus, Curvature, MAX_TANGENT_NORM};
use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Probability floor used inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;
const TAYLOR_THETA: f64 = 1e-3;

/// Geometry the fused operators work in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Space {
    Hyperbolic(Curvature),
    Euclidean,
}

impl Space {
    pub fn is_hyperbolic(self) -> bool {
        matches!(self, Space::Hyperbolic(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Query and key row ranges for one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// One contrastive item: anchor row, positive column, negative columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastItem {
    pub row: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

enum Op {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Lift(Var),
    Exp0(Var),
    Log0(Var),
    ExpAt(Var, Var),
    TransportOrigin(Var, Var),
    SqDistRows(Var, Var),
    SqDistMatrix(Var, Var),
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        head_dim: usize,
        scale: f64,
        probs: Vec<Mat>,
    },
    NeighborAggregate {
        u: Var,
        b_att: Var,
        neighbors: Vec<Vec<usize>>,
        alphas: Vec<Vec<f64>>,
    },
    StickBreak(Var, Vec<Vec<usize>>),
    TreeReach(Var, Vec<Option<usize>>),
    TopicNll(Var, Vec<Vec<(usize, f64)>>),
    InfoNce {
        sqd: Var,
        items: Vec<ContrastItem>,
        tau: f64,
    },
    SoftmaxXent(Var, Vec<usize>),
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter that was placed on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> + '_ {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    space: Space,
    param_vars: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

impl<'a> Tape<'a> {
    pub fn new(space: Space) -> Self {
        Self {
            nodes: Vec::new(),
            space,
            param_vars: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_ref(&mut self, value: &'a Mat) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a parameter on the tape once; later calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1 x c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let out = self.value(a) + &self.value(r).row(0);
        self.push(out, Op::AddRow(a, r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| gelu(x).0);
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(1), idx);
        self.push(out, Op::GatherCols(a, idx.to_vec()))
    }

    /// Prepends a zero column: Euclidean `n`-vectors become tangent vectors
    /// at the origin of `H^{n,K}`.
    pub fn lift(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros((x.nrows(), x.ncols() + 1));
        out.slice_mut(s![.., 1..]).assign(x);
        self.push(out, Op::Lift(a))
    }

    /// Row-wise `exp_0`. Column 0 of the input is ignored (projection onto
    /// the tangent space at the origin); spatial norms are clipped.
    pub fn exp0(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros(x.raw_dim());
        match self.space {
            Space::Hyperbolic(k) => {
                let sk = k.sqrt_k();
                for (i, row) in x.rows().into_iter().enumerate() {
                    let u = row.slice(s![1..]);
                    let r = norm(u);
                    let rho = r.min(MAX_TANGENT_NORM);
                    let theta = rho / sk;
                    out[[i, 0]] = sk * theta.cosh();
                    let f = if r == 0.0 { 0.0 } else { sk * theta.sinh() / r };
                    for j in 1..row.len() {
                        out[[i, j]] = f * row[j];
                    }
                }
            }
            Space::Euclidean => {
                out.slice_mut(s![.., 1..]).assign(&x.slice(s![.., 1..]));
            }
        }
        self.push(out, Op::Exp0(a))
    }

    /// Row-wise `log_0`, computed from the spatial coordinates. Output
    /// column 0 is zero.
    pub fn log0(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Array2::zeros(x.raw_dim());
        match self.space {
            Space::Hyperbolic(k) => {
                let sk = k.sqrt_k();
                for (i, row) in x.rows().into_iter().enumerate() {
                    let r = norm(row.slice(s![1..]));
                    let q = asinh_ratio(r / sk);
                    for j in 1..row.len() {
                        out[[i, j]] = q * row[j];
                    }
                }
            }
            Space::Euclidean => {
                out.slice_mut(s![.., 1..]).assign(&x.slice(s![.., 1..]));
            }
        }
        self.push(out, Op::Log0(a))
    }

    /// Row-wise `exp_x(v)` for points `x` and tangent vectors `v`.
    pub fn exp_at(&mut self, x: Var, v: Var) -> Var {
        let xs = self.value(x);
        let vs = self.value(v);
        let out = match self.space {
            Space::Hyperbolic(k) => {
                let sk = k.sqrt_k();
                let mut out = Array2::zeros(xs.raw_dim());
                for i in 0..xs.nrows() {
                    let vr = vs.row(i);
                    let r = minkowski_sq(vr, vr).max(0.0).sqrt();
                    let rho = r.min(MAX_TANGENT_NORM);
                    let theta = rho / sk;
                    let c = theta.cosh();
                    let f = if r == 0.0 { 0.0 } else { sk * theta.sinh() / r };
                    for j in 0..xs.ncols() {
                        out[[i, j]] = c * xs[[i, j]] + f * vr[j];
                    }
                }
                out
            }
            Space::Euclidean => xs + vs,
        };
        self.push(out, Op::ExpAt(x, v))
    }

    /// Transports `[0 || b]` from the origin to each row point of `z`.
    /// `b` is a `1 x n` Euclidean bias.
    pub fn transport_origin(&mut self, z: Var, b: Var) -> Var {
        let zs = self.value(z);
        let bs = self.value(b);
        let mut out = Array2::zeros(zs.raw_dim());
        out.slice_mut(s![.., 1..]).assign(&bs.row(0));
        if let Space::Hyperbolic(k) = self.space {
            let sk = k.sqrt_k();
            for i in 0..zs.nrows() {
                let zr = zs.row(i);
                let p: f64 = zr.slice(s![1..]).dot(&bs.row(0));
                let c = p / (k.k() + sk * zr[0]);
                out[[i, 0]] += c * (sk + zr[0]);
                for j in 1..zs.ncols() {
                    out[[i, j]] += c * zr[j];
                }
            }
        }
        self.push(out, Op::TransportOrigin(z, b))
    }

    /// Squared geodesic distance between matching rows; `m x 1`.
    pub fn sq_dist_rows(&mut self, x: Var, y: Var) -> Var {
        let xs = self.value(x);
        let ys = self.value(y);
        let mut out = Array2::zeros((xs.nrows(), 1));
        for i in 0..xs.nrows() {
            out[[i, 0]] = sq_dist(self.space, xs.row(i), ys.row(i)).0;
        }
        self.push(out, Op::SqDistRows(x, y))
    }

    /// All-pairs squared geodesic distances; `m x p`.
    pub fn sq_dist_matrix(&mut self, x: Var, y: Var) -> Var {
        let xs = self.value(x);
        let ys = self.value(y);
        let mut out = Array2::zeros((xs.nrows(), ys.nrows()));
        for i in 0..xs.nrows() {
            for j in 0..ys.nrows() {
                out[[i, j]] = sq_dist(self.space, xs.row(i), ys.row(j)).0;
            }
        }
        self.push(out, Op::SqDistMatrix(x, y))
    }

    /// Layer norm over the spatial columns `1..`; column 0 of the output is 0.
    /// `gain` and `bias` are `1 x (c - 1)`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        let x = self.value(a);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = x.ncols() - 1;
        let mut out = Array2::zeros(x.raw_dim());
        let mut xhat = Array2::zeros((x.nrows(), n));
        let mut inv_std = Vec::with_capacity(x.nrows());
        for i in 0..x.nrows() {
            let row = x.slice(s![i, 1..]);
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[[i, j]] = h;
                out[[i, j + 1]] = h * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention over independent segments.
    ///
    /// Head `h` reads columns `h*head_dim..(h+1)*head_dim` of `q`, `k`, `v`.
    /// Query rows of a segment attend only to that segment's key rows. The
    /// output has one row per query row and `heads * head_dim` columns;
    /// query rows outside every segment are zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        head_dim: usize,
        scale: f64,
    ) -> Var {
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((qs.nrows(), heads * head_dim));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in &segments {
            for h in 0..heads {
                let cols = h * head_dim..(h + 1) * head_dim;
                let qh = qs.slice(s![seg.q_start..seg.q_start + seg.q_len, cols.clone()]);
                let kh = ks.slice(s![seg.k_start..seg.k_start + seg.k_len, cols.clone()]);
                let vh = vs.slice(s![seg.k_start..seg.k_start + seg.k_len, cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                for mut row in p.rows_mut() {
                    softmax_in_place(row.as_slice_mut().expect("contiguous row"));
                }
                out.slice_mut(s![seg.q_start..seg.q_start + seg.q_len, cols.clone()])
                    .assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                head_dim,
                scale,
                probs,
            },
        )
    }

    /// Graph attention aggregation:
    /// `out_i = 1/2 (u_i + sum_j alpha_ij u_j)` with
    /// `alpha_i = softmax_j(b_att^T [u_i || u_j])` over `neighbors[i]`.
    pub fn neighbor_aggregate(&mut self, u: Var, b_att: Var, neighbors: Vec<Vec<usize>>) -> Var {
        let us = self.value(u);
        let b = self.value(b_att);
        let c = us.ncols();
        let (b1, b2) = (b.slice(s![0, ..c]), b.slice(s![0, c..]));
        let mut out = us * 0.5;
        let mut alphas = Vec::with_capacity(us.nrows());
        for (i, nbrs) in neighbors.iter().enumerate() {
            if nbrs.is_empty() {
                alphas.push(Vec::new());
                continue;
            }
            let self_score = us.row(i).dot(&b1);
            let mut a: Vec<f64> = nbrs.iter().map(|&j| self_score + us.row(j).dot(&b2)).collect();
            softmax_in_place(&mut a);
            for (&j, &w) in nbrs.iter().zip(&a) {
                let uj = us.row(j).to_owned();
                out.row_mut(i).scaled_add(0.5 * w, &uj);
            }
            alphas.push(a);
        }
        self.push(
            out,
            Op::NeighborAggregate {
                u,
                b_att,
                neighbors,
                alphas,
            },
        )
    }

    /// Stick-breaking within each column group, row by row. Group member `k`
    /// receives `sig_k * prod_{j<k} (1 - sig_j)`; the last member receives
    /// the residual `prod_{j<last} (1 - sig_j)`. Columns outside every group
    /// are set to 1.
    pub fn stick_break(&mut self, sig: Var, groups: Vec<Vec<usize>>) -> Var {
        let sv = self.value(sig);
        let mut out = Array2::ones(sv.raw_dim());
        for i in 0..sv.nrows() {
            for g in &groups {
                let mut rem = 1.0;
                for (pos, &c) in g.iter().enumerate() {
                    if pos + 1 == g.len() {
                        out[[i, c]] = rem;
                    } else {
                        out[[i, c]] = sv[[i, c]] * rem;
                        rem *= 1.0 - sv[[i, c]];
                    }
                }
            }
        }
        self.push(out, Op::StickBreak(sig, groups))
    }

    /// `reach[t] = cond[t] * reach[parent[t]]`; parents precede children.
    pub fn tree_reach(&mut self, cond: Var, parent: Vec<Option<usize>>) -> Var {
        let cv = self.value(cond);
        let mut out = cv.clone();
        for i in 0..cv.nrows() {
            for (t, p) in parent.iter().enumerate() {
                if let Some(p) = p {
                    out[[i, t]] *= out[[i, *p]];
                }
            }
        }
        self.push(out, Op::TreeReach(cond, parent))
    }

    /// `-sum_rows sum_w count_w * ln(max(dhat_w, floor))`; `1 x 1`.
    pub fn topic_nll(&mut self, dhat: Var, counts: Vec<Vec<(usize, f64)>>) -> Var {
        let d = self.value(dhat);
        let mut total = 0.0;
        for (i, row) in counts.iter().enumerate() {
            for &(w, c) in row {
                total -= c * d[[i, w]].max(PROB_FLOOR).ln();
            }
        }
        self.push(Array2::from_elem((1, 1), total), Op::TopicNll(dhat, counts))
    }

    /// Sum over items of `-ln softmax(-sqd / tau)[positive]` restricted to
    /// the positive and negative columns of the anchor row; `1 x 1`.
    pub fn info_nce(&mut self, sqd: Var, items: Vec<ContrastItem>, tau: f64) -> Var {
        let d = self.value(sqd);
        let mut total = 0.0;
        for it in &items {
            let logits = contrast_logits(d, it, tau);
            total += logsumexp(&logits) - logits[0];
        }
        self.push(Array2::from_elem((1, 1), total), Op::InfoNce { sqd, items, tau })
    }

    /// Sum of cross-entropies of row-wise softmax against target classes.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let l = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = l.row(i).to_vec();
            total += logsumexp(&row) - row[t];
        }
        self.push(Array2::from_elem((1, 1), total), Op::SoftmaxXent(logits, targets))
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.param_order.clone(),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let out = &*node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulBt(a, b) => {
                let ga = g.dot(self.value(*b));
                let gb = g.t().dot(self.value(*a));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                accumulate(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::Tanh(a) => accumulate(grads, *a, g * &out.mapv(|t| 1.0 - t * t)),
            Op::Sigmoid(a) => accumulate(grads, *a, g * &out.mapv(|s| s * (1.0 - s))),
            Op::Gelu(a) => {
                let d = self.value(*a).mapv(|x| gelu(x).1);
                accumulate(grads, *a, g * &d);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Array2::zeros(out.raw_dim());
                for i in 0..out.nrows() {
                    let (p, gr) = (out.row(i), g.row(i));
                    let dot = p.dot(&gr);
                    for j in 0..out.ncols() {
                        ga[[i, j]] = p[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    accumulate(grads, *p, g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Array2::zeros(self.value(*a).raw_dim());
                for (r, &src) in idx.iter().enumerate() {
                    let row = g.row(r);
                    ga.row_mut(src).zip_mut_with(&row, |x, y| *x += y);
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherCols(a, idx) => {
                let mut ga = Array2::zeros(self.value(*a).raw_dim());
                for (c, &src) in idx.iter().enumerate() {
                    let col = g.column(c);
                    ga.column_mut(src).zip_mut_with(&col, |x, y| *x += y);
                }
                accumulate(grads, *a, ga);
            }
            Op::Lift(a) => accumulate(grads, *a, g.slice(s![.., 1..]).to_owned()),
            Op::Exp0(a) => {
                let ga = self.exp0_backward(self.value(*a), g);
                accumulate(grads, *a, ga);
            }
            Op::Log0(a) => {
                let ga = self.log0_backward(self.value(*a), g);
                accumulate(grads, *a, ga);
            }
            Op::ExpAt(x, v) => {
                let (gx, gv) = self.exp_at_backward(self.value(*x), self.value(*v), g);
                accumulate(grads, *x, gx);
                accumulate(grads, *v, gv);
            }
            Op::TransportOrigin(z, b) => {
                let (gz, gb) = self.transport_backward(self.value(*z), self.value(*b), g);
                if let Some(gz) = gz {
                    accumulate(grads, *z, gz);
                }
                accumulate(grads, *b, gb);
            }
            Op::SqDistRows(x, y) => {
                let (xs, ys) = (self.value(*x), self.value(*y));
                let mut gx = Array2::zeros(xs.raw_dim());
                let mut gy = Array2::zeros(ys.raw_dim());
                for i in 0..xs.nrows() {
                    let coef = g[[i, 0]] * sq_dist(self.space, xs.row(i), ys.row(i)).1;
                    sq_dist_grad_into(self.space, xs.row(i), ys.row(i), coef, &mut gx, &mut gy, i, i);
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *y, gy);
            }
            Op::SqDistMatrix(x, y) => {
                let (xs, ys) = (self.value(*x), self.value(*y));
                let mut gx = Array2::zeros(xs.raw_dim());
                let mut gy = Array2::zeros(ys.raw_dim());
                for i in 0..xs.nrows() {
                    for j in 0..ys.nrows() {
                        if g[[i, j]] == 0.0 {
                            continue;
                        }
                        let coef = g[[i, j]] * sq_dist(self.space, xs.row(i), ys.row(j)).1;
                        sq_dist_grad_into(self.space, xs.row(i), ys.row(j), coef, &mut gx, &mut gy, i, j);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *y, gy);
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let n = xhat.ncols();
                let gs = g.slice(s![.., 1..]);
                let mut ga = Array2::zeros(self.value(*a).raw_dim());
                let ggain = (&gs * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                let gbias = gs.sum_axis(Axis(0)).insert_axis(Axis(0));
                for i in 0..xhat.nrows() {
                    let dxhat: Vec<f64> = (0..n).map(|j| gs[[i, j]] * gv[[0, j]]).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = (0..n).map(|j| dxhat[j] * xhat[[i, j]]).sum::<f64>() / n as f64;
                    for j in 0..n {
                        ga[[i, j + 1]] = inv_std[i] * (dxhat[j] - mean_d - xhat[[i, j]] * mean_dx);
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *gain, ggain);
                accumulate(grads, *bias, gbias);
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                head_dim,
                scale,
                probs,
            } => {
                let (qs, ks, vs) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = Array2::zeros(qs.raw_dim());
                let mut gk = Array2::zeros(ks.raw_dim());
                let mut gv = Array2::zeros(vs.raw_dim());
                let mut pi = 0;
                for seg in segments {
                    let qr = seg.q_start..seg.q_start + seg.q_len;
                    let kr = seg.k_start..seg.k_start + seg.k_len;
                    for h in 0..*heads {
                        let cols = h * head_dim..(h + 1) * head_dim;
                        let p = &probs[pi];
                        pi += 1;
                        let go = g.slice(s![qr.clone(), cols.clone()]);
                        let qh = qs.slice(s![qr.clone(), cols.clone()]);
                        let kh = ks.slice(s![kr.clone(), cols.clone()]);
                        let vh = vs.slice(s![kr.clone(), cols.clone()]);
                        let dv = p.t().dot(&go);
                        let dp = go.dot(&vh.t());
                        let mut ds = Array2::zeros(p.raw_dim());
                        for r in 0..p.nrows() {
                            let dot = p.row(r).dot(&dp.row(r));
                            for c in 0..p.ncols() {
                                ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot) * scale;
                            }
                        }
                        let mut gq_blk = gq.slice_mut(s![qr.clone(), cols.clone()]);
                        gq_blk += &ds.dot(&kh);
                        let mut gk_blk = gk.slice_mut(s![kr.clone(), cols.clone()]);
                        gk_blk += &ds.t().dot(&qh);
                        let mut gv_blk = gv.slice_mut(s![kr.clone(), cols.clone()]);
                        gv_blk += &dv;
                    }
                }
                accumulate(grads, *q, gq);
                accumulate(grads, *k, gk);
                accumulate(grads, *v, gv);
            }
            Op::NeighborAggregate {
                u,
                b_att,
                neighbors,
                alphas,
            } => {
                let us = self.value(*u);
                let b = self.value(*b_att);
                let c = us.ncols();
                let mut gu = g * 0.5;
                let mut gb = Array2::zeros(b.raw_dim());
                for (i, nbrs) in neighbors.iter().enumerate() {
                    if nbrs.is_empty() {
                        continue;
                    }
                    let a = &alphas[i];
                    let gi = g.row(i).to_owned();
                    let dalpha: Vec<f64> = nbrs.iter().map(|&j| 0.5 * gi.dot(&us.row(j))).collect();
                    let mean: f64 = a.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
                    for (n, &j) in nbrs.iter().enumerate() {
                        gu.row_mut(j).scaled_add(0.5 * a[n], &gi);
                        let ds = a[n] * (dalpha[n] - mean);
                        if ds == 0.0 {
                            continue;
                        }
                        let (ui, uj) = (us.row(i).to_owned(), us.row(j).to_owned());
                        gb.slice_mut(s![0, ..c]).scaled_add(ds, &ui);
                        gb.slice_mut(s![0, c..]).scaled_add(ds, &uj);
                        let (b1, b2) = (b.slice(s![0, ..c]).to_owned(), b.slice(s![0, c..]).to_owned());
                        gu.row_mut(i).scaled_add(ds, &b1);
                        gu.row_mut(j).scaled_add(ds, &b2);
                    }
                }
                accumulate(grads, *u, gu);
                accumulate(grads, *b_att, gb);
            }
            Op::StickBreak(sig, groups) => {
                let sv = self.value(*sig);
                let mut gs = Array2::zeros(sv.raw_dim());
                for i in 0..sv.nrows() {
                    for grp in groups {
                        let m = grp.len();
                        for (pos, &c) in grp.iter().enumerate() {
                            let upstream = g[[i, c]];
                            if upstream == 0.0 {
                                continue;
                            }
                            let last = pos + 1 == m;
                            let lead = if last { 1.0 } else { sv[[i, c]] };
                            if !last {
                                let rem: f64 = grp[..pos].iter().map(|&j| 1.0 - sv[[i, j]]).product();
                                gs[[i, c]] += upstream * rem;
                            }
                            for skip in 0..pos {
                                let rest: f64 = grp[..pos]
                                    .iter()
                                    .enumerate()
                                    .filter(|(q, _)| *q != skip)
                                    .map(|(_, &j)| 1.0 - sv[[i, j]])
                                    .product();
                                gs[[i, grp[skip]]] -= upstream * lead * rest;
                            }
                        }
                    }
                }
                accumulate(grads, *sig, gs);
            }
            Op::TreeReach(cond, parent) => {
                let cv = self.value(*cond);
                let mut greach = g.clone();
                let mut gc = Array2::zeros(cv.raw_dim());
                for i in 0..cv.nrows() {
                    for t in (0..parent.len()).rev() {
                        match parent[t] {
                            Some(p) => {
                                gc[[i, t]] = greach[[i, t]] * out[[i, p]];
                                greach[[i, p]] += greach[[i, t]] * cv[[i, t]];
                            }
                            None => gc[[i, t]] = greach[[i, t]],
                        }
                    }
                }
                accumulate(grads, *cond, gc);
            }
            Op::TopicNll(dhat, counts) => {
                let d = self.value(*dhat);
                let mut gd = Array2::zeros(d.raw_dim());
                for (i, row) in counts.iter().enumerate() {
                    for &(w, c) in row {
                        if d[[i, w]] > PROB_FLOOR {
                            gd[[i, w]] -= g[[0, 0]] * c / d[[i, w]];
                        }
                    }
                }
                accumulate(grads, *dhat, gd);
            }
            Op::InfoNce { sqd, items, tau } => {
                let d = self.value(*sqd);
                let mut gd = Array2::zeros(d.raw_dim());
                for it in items {
                    let logits = contrast_logits(d, it, *tau);
                    let lse = logsumexp(&logits);
                    let cols = std::iter::once(it.positive).chain(it.negatives.iter().copied());
                    for (n, col) in cols.enumerate() {
                        let p = (logits[n] - lse).exp();
                        let dl = if n == 0 { p - 1.0 } else { p };
                        gd[[it.row, col]] -= g[[0, 0]] * dl / tau;
                    }
                }
                accumulate(grads, *sqd, gd);
            }
            Op::SoftmaxXent(logits, targets) => {
                let l = self.value(*logits);
                let mut gl = Array2::zeros(l.raw_dim());
                for (i, &t) in targets.iter().enumerate() {
                    let mut row = l.row(i).to_vec();
                    softmax_in_place(&mut row);
                    for (j, p) in row.iter().enumerate() {
                        gl[[i, j]] = g[[0, 0]] * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                accumulate(grads, *logits, gl);
            }
        }
    }

    fn exp0_backward(&self, x: &Mat, g: &Mat) -> Mat {
        let mut ga = Array2::zeros(x.raw_dim());
        match self.space {
            Space::Hyperbolic(k) => {
                let sk = k.sqrt_k();
                for i in 0..x.nrows() {
                    let u = x.slice(s![i, 1..]);
                    let gs = g.slice(s![i, 1..]);
                    let r = norm(u);
                    let mut gu = ga.slice_mut(s![i, 1..]);
                    if r > MAX_TANGENT_NORM {
                        let theta = MAX_TANGENT_NORM / sk;
                        let coef = sk * theta.sinh() / r;
                        let proj = gs.dot(&u) / (r * r);
                        gu.assign(&(&gs - &(&u * proj)));
                        gu *= coef;
                        continue;
                    }
                    let theta = r / sk;
                    let (h, f, fpr) = if theta < TAYLOR_THETA {
                        let t2 = theta * theta;
                        ((1.0 + t2 / 6.0) / sk, 1.0 + t2 / 6.0, (1.0 / 3.0 + t2 / 30.0) / k.k())
                    } else {
                        let (sh, ch) = (theta.sinh(), theta.cosh());
                        (sh / r, sk * sh / r, (ch * r - sk * sh) / (r * r * r))
                    };
                    let gdotu = gs.dot(&u);
                    let g0 = g[[i, 0]];
                    for j in 0..u.len() {
                        gu[j] = g0 * h * u[j] + f * gs[j] + fpr * gdotu * u[j];
                    }
                }
            }
            Space::Euclidean => {
                ga.slice_mut(s![.., 1..]).assign(&g.slice(s![.., 1..]));
            }
        }
        ga
    }

    fn log0_backward(&self, x: &Mat, g: &Mat) -> Mat {
        let mut ga = Array2::zeros(x.raw_dim());
        match self.space {
            Space::Hyperbolic(k) => {
                let sk = k.sqrt_k();
                for i in 0..x.nrows() {
                    let u = x.slice(s![i, 1..]);
                    let gs = g.slice(s![i, 1..]);
                    let r = norm(u);
                    let theta = r / sk;
                    let q = asinh_ratio(theta);
                    let qpr = if theta < TAYLOR_THETA {
                        (-1.0 / 3.0 + 0.3 * theta * theta) / k.k()
                    } else {
                        (theta / (1.0 + theta * theta).sqrt() - theta.asinh()) / (theta * theta * theta * k.k())
                    };
                    let gdotu = gs.dot(&u);
                    let mut gu = ga.slice_mut(s![i, 1..]);
                    for j in 0..u.len() {
                        gu[j] = q * gs[j] + qpr * gdotu * u[j];
                    }
                }
            }
            Space::Euclidean => {
                ga.slice_mut(s![.., 1..]).assign(&g.slice(s![.., 1..]));
            }
        }
        ga
    }

    fn exp_at_backward(&self, xs: &Mat, vs: &Mat, g: &Mat) -> (Mat, Mat) {
        let Space::Hyperbolic(k) = self.space else {
            return (g.clone(), g.clone());
        };
        let sk = k.sqrt_k();
        let mut gx = Array2::zeros(xs.raw_dim());
        let mut gv = Array2::zeros(vs.raw_dim());
        for i in 0..xs.nrows() {
            let (x, v, gr) = (xs.row(i), vs.row(i), g.row(i));
            let r = minkowski_sq(v, v).max(0.0).sqrt();
            let rho = r.min(MAX_TANGENT_NORM);
            let theta = rho / sk;
            gx.row_mut(i).assign(&(&gr * theta.cosh()));
            // gradient with respect to the (possibly clipped) tangent v' = (rho/r) v
            let (f, cpr, fpr) = if theta < TAYLOR_THETA {
                let t2 = theta * theta;
                (
                    1.0 + t2 / 6.0,
                    (1.0 + t2 / 6.0) / k.k(),
                    (1.0 / 3.0 + t2 / 30.0) / k.k(),
                )
            } else {
                let (sh, ch) = (theta.sinh(), theta.cosh());
                (sk * sh / rho, sh / (sk * rho), (ch * rho - sk * sh) / (rho * rho * rho))
            };
            let scale = if r > MAX_TANGENT_NORM { rho / r } else { 1.0 };
            let vc: Vec<f64> = v.iter().map(|c| c * scale).collect();
            let gx_dot = gr.dot(&x);
            let gv_dot: f64 = gr.iter().zip(&vc).map(|(a, b)| a * b).sum();
            let mut gvc: Vec<f64> = (0..vc.len())
                .map(|j| {
                    let jv = if j == 0 { -vc[j] } else { vc[j] };
                    f * gr[j] + (gx_dot * cpr + gv_dot * fpr) * jv
                })
                .collect();
            if r > MAX_TANGENT_NORM {
                let dot: f64 = gvc.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                for j in 0..gvc.len() {
                    let jv = if j == 0 { -v[j] } else { v[j] };
                    gvc[j] = scale * (gvc[j] - dot * jv / (r * r));
                }
            }
            for (j, val) in gvc.into_iter().enumerate() {
                gv[[i, j]] = val;
            }
        }
        (gx, gv)
    }

    fn transport_backward(&self, zs: &Mat, bs: &Mat, g: &Mat) -> (Option<Mat>, Mat) {
        let mut gb = g.slice(s![.., 1..]).sum_axis(Axis(0)).insert_axis(Axis(0));
        let Space::Hyperbolic(k) = self.space else {
            return (None, gb);
        };
        let sk = k.sqrt_k();
        let b = bs.row(0);
        let mut gz = Array2::zeros(zs.raw_dim());
        for i in 0..zs.nrows() {
            let z = zs.row(i);
            let gr = g.row(i);
            let p: f64 = z.slice(s![1..]).dot(&b);
            let den = k.k() + sk * z[0];
            let c = p / den;
            // G . (o + z)
            let w = gr[0] * (sk + z[0]) + gr.slice(s![1..]).dot(&z.slice(s![1..]));
            {
                let mut gbr = gb.row_mut(0);
                gbr.scaled_add(w / den, &z.slice(s![1..]));
            }
            let mut gzr = gz.row_mut(i);
            gzr.assign(&(&gr * c));
            gzr[0] += w * (-p * sk / (den * den));
            for j in 1..z.len() {
                gzr[j] += w * b[j - 1] / den;
            }
        }
        (Some(gz), gb)
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

#[inline]
fn minkowski_sq(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.slice(s![1..]).dot(&b.slice(s![1..])) - a[0] * b[0]
}

/// `asinh(t) / t`, equal to 1 at `t = 0`.
#[inline]
fn asinh_ratio(t: f64) -> f64 {
    if t < TAYLOR_THETA {
        1.0 - t * t / 6.0
    } else {
        t.asinh() / t
    }
}

/// Squared distance and `d(dist^2)/d(gap)` where `gap` is the quantity whose
/// gradient [`sq_dist_grad_into`] writes.
#[inline]
fn sq_dist(space: Space, x: ArrayView1<f64>, y: ArrayView1<f64>) -> (f64, f64) {
    match space {
        Space::Hyperbolic(k) => {
            let mut gap = 0.0;
            for j in 1..x.len() {
                let d = x[j] - y[j];
                gap += d * d;
            }
            let d0 = x[0] - y[0];
            let gap = (gap - d0 * d0).max(0.0);
            let a = arcosh_one_plus(gap / (2.0 * k.k()));
            let ratio = if a < TAYLOR_THETA {
                1.0 - a * a / 6.0
            } else {
                a / a.sinh()
            };
            // d(d^2)/d(gap) = K * 2a * (1/sqrt(eps(2+eps))) / (2K) = a / sinh(a)
            (k.k() * a * a, ratio)
        }
        Space::Euclidean => {
            let d: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, 1.0)
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn sq_dist_grad_into(
    space: Space,
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    coef: f64,
    gx: &mut Mat,
    gy: &mut Mat,
    xi: usize,
    yi: usize,
) {
    // d(gap)/dx = 2 J (x - y) with J = diag(-1, 1, ..., 1) in hyperbolic
    // space, 2 (x - y) in Euclidean space.
    for j in 0..x.len() {
        let sign = if j == 0 && space.is_hyperbolic() { -1.0 } else { 1.0 };
        let d = 2.0 * sign * (x[j] - y[j]) * coef;
        gx[[xi, j]] += d;
        gy[[yi, j]] -= d;
    }
}

fn contrast_logits(d: &Mat, it: &ContrastItem, tau: f64) -> Vec<f64> {
    std::iter::once(it.positive)
        .chain(it.negatives.iter().copied())
        .map(|c| -d[[it.row, c]] / tau)
        .collect()
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU value and derivative (tanh approximation).
#[inline]
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (value, deriv)
}
