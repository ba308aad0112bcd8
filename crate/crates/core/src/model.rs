//! Parameter layout and the nested encoder.
//!
//! [`Model::encode`] runs the full pipeline on one tape for a set of
//! documents whose neighborhoods index into the same set (training).
//! [`Model::infer`] runs the identical computation layer by layer over a
//! whole corpus in independent chunks (inference and evaluation).

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, RunConfig};
use crate::doc_topic::{doc_topics, TopicOutputs, TreeLayout};
use crate::drnn::{self, DrnnParams, RnnParams};
use crate::exec::Exec;
use crate::geometry::Curvature;
use crate::graph_attn::{self, GraphParams};
use crate::params::{glorot, uniform, ParamId, ParamStore};
use crate::tape::{Mat, Space, Tape, Var};
use crate::transformer::{self, EmbedParams, Heads, LayerParams, Packed};

/// Sizes that determine the parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab: usize,
    /// Number of classes for the supervised head; `0` disables it.
    pub classes: usize,
}

impl ModelShape {
    pub fn from_config(cfg: &RunConfig, vocab: usize, classes: usize) -> Self {
        Self {
            dim: cfg.model.dim,
            layers: cfg.model.layers,
            heads: cfg.model.heads,
            max_len: cfg.model.max_len,
            vocab,
            classes: if cfg.loss.supervised { classes } else { 0 },
        }
    }

    pub fn heads(&self) -> Heads {
        Heads::new(self.dim + 1, self.heads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierParams {
    pub w1: ParamId,
    pub c1: ParamId,
    pub w2: ParamId,
    pub c2: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub embed: EmbedParams,
    pub drnn: DrnnParams,
    pub level: RnnParams,
    pub graph: GraphParams,
    pub layers: Vec<LayerParams>,
    /// `|V| x (n+1)` decoder word matrix.
    pub decoder: ParamId,
    pub classifier: Option<ClassifierParams>,
}

/// Missing or mis-shaped tensor when rebuilding a layout from a store.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parameter {name}: {msg}")]
pub struct LayoutError {
    pub name: String,
    pub msg: String,
}

/// Scale of the tree recurrences' biases and seed state: topics start close
/// to the origin, within Fermi-Dirac range of the documents.
const TREE_INIT: f64 = 0.3;
/// Half-width of the uniform decoder init (unit variance).
const DECODER_INIT: f64 = 1.7320508075688772;

impl ParamLayout {
    /// Fresh parameters; every draw comes from `seed`.
    pub fn init(shape: &ModelShape, seed: u64) -> (ParamStore, Self) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let n = shape.dim;
        let n1 = n + 1;
        let heads = shape.heads();
        let unit = (3.0 / n as f64).sqrt();

        let embed = EmbedParams {
            tokens: s.insert("embed.tokens", uniform(&mut rng, shape.vocab, n, unit)),
            cls: s.insert("embed.cls", Array2::zeros((1, n))),
            positions: s.insert("embed.positions", uniform(&mut rng, shape.max_len + 1, n, 0.1 * unit)),
        };
        let rnn = |s: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| RnnParams {
            w: s.insert(&format!("{name}.w"), glorot(rng, n1, n1)),
            b: s.insert(&format!("{name}.b"), uniform(rng, 1, n, TREE_INIT * unit)),
        };
        let ancestral = rnn(&mut s, &mut rng, "drnn.ancestral");
        let fraternal = rnn(&mut s, &mut rng, "drnn.fraternal");
        let drnn = DrnnParams {
            ancestral,
            fraternal,
            combine_w: s.insert("drnn.combine.w", glorot(&mut rng, n1, n1)),
            init_state: s.insert("drnn.init_state", uniform(&mut rng, 1, n, TREE_INIT * unit)),
        };
        let level = rnn(&mut s, &mut rng, "level");
        let graph = GraphParams {
            w_g: s.insert("graph.w", glorot(&mut rng, n1, n1)),
            b_att: s.insert("graph.b_att", uniform(&mut rng, 1, 2 * n1, 0.1)),
        };
        let ln_gain = Array2::from_elem((1, n), 1.0 / (n as f64).sqrt());
        let layers = (0..shape.layers)
            .map(|l| {
                let mut ins = |name: &str, v: Mat| s.insert(&format!("layer{l}.{name}"), v);
                LayerParams {
                    wq: ins("wq", glorot(&mut rng, n1, n1)),
                    wk: ins("wk", glorot(&mut rng, n1, n1)),
                    wv: ins("wv", glorot(&mut rng, n1, n1)),
                    wo: ins("wo", glorot(&mut rng, heads.width(), n1)),
                    ln1_gain: ins("ln1.gain", ln_gain.clone()),
                    ln1_bias: ins("ln1.bias", Array2::zeros((1, n))),
                    w1: ins("mlp.w1", glorot(&mut rng, n1, 4 * n1)),
                    c1: ins("mlp.c1", Array2::zeros((1, 4 * n1))),
                    w2: ins("mlp.w2", glorot(&mut rng, 4 * n1, n1)),
                    c2: ins("mlp.c2", Array2::zeros((1, n1))),
                    ln2_gain: ins("ln2.gain", ln_gain.clone()),
                    ln2_bias: ins("ln2.bias", Array2::zeros((1, n))),
                }
            })
            .collect();
        let decoder = s.insert("decoder.u", uniform(&mut rng, shape.vocab, n1, DECODER_INIT));
        let classifier = (shape.classes > 0).then(|| ClassifierParams {
            w1: s.insert("classifier.w1", glorot(&mut rng, n1, n1)),
            c1: s.insert("classifier.c1", Array2::zeros((1, n1))),
            w2: s.insert("classifier.w2", glorot(&mut rng, n1, shape.classes)),
            c2: s.insert("classifier.c2", Array2::zeros((1, shape.classes))),
        });
        let layout = Self {
            embed,
            drnn,
            level,
            graph,
            layers,
            decoder,
            classifier,
        };
        (s, layout)
    }

    /// Rebuilds the layout from tensor names, checking every shape against
    /// a freshly initialised reference.
    pub fn resolve(store: &ParamStore, shape: &ModelShape) -> Result<Self, LayoutError> {
        let (reference, ref_layout) = Self::init(shape, 0);
        let map = |id: ParamId| -> Result<ParamId, LayoutError> {
            let name = reference.name(id);
            let found = store.get(name).ok_or_else(|| LayoutError {
                name: name.to_string(),
                msg: "missing".into(),
            })?;
            let (want, got) = (reference.value(id).dim(), store.value(found).dim());
            if want != got {
                return Err(LayoutError {
                    name: name.to_string(),
                    msg: format!("shape {got:?}, expected {want:?}"),
                });
            }
            Ok(found)
        };
        if store.len() != reference.len() {
            return Err(LayoutError {
                name: "*".into(),
                msg: format!("{} tensors, expected {}", store.len(), reference.len()),
            });
        }
        let rnn = |p: RnnParams| -> Result<RnnParams, LayoutError> {
            Ok(RnnParams {
                w: map(p.w)?,
                b: map(p.b)?,
            })
        };
        let r = &ref_layout;
        Ok(Self {
            embed: EmbedParams {
                tokens: map(r.embed.tokens)?,
                cls: map(r.embed.cls)?,
                positions: map(r.embed.positions)?,
            },
            drnn: DrnnParams {
                ancestral: rnn(r.drnn.ancestral)?,
                fraternal: rnn(r.drnn.fraternal)?,
                combine_w: map(r.drnn.combine_w)?,
                init_state: map(r.drnn.init_state)?,
            },
            level: rnn(r.level)?,
            graph: GraphParams {
                w_g: map(r.graph.w_g)?,
                b_att: map(r.graph.b_att)?,
            },
            layers: r
                .layers
                .iter()
                .map(|l| {
                    Ok(LayerParams {
                        wq: map(l.wq)?,
                        wk: map(l.wk)?,
                        wv: map(l.wv)?,
                        wo: map(l.wo)?,
                        ln1_gain: map(l.ln1_gain)?,
                        ln1_bias: map(l.ln1_bias)?,
                        w1: map(l.w1)?,
                        c1: map(l.c1)?,
                        w2: map(l.w2)?,
                        c2: map(l.c2)?,
                        ln2_gain: map(l.ln2_gain)?,
                        ln2_bias: map(l.ln2_bias)?,
                    })
                })
                .collect::<Result<_, LayoutError>>()?,
            decoder: map(r.decoder)?,
            classifier: match r.classifier {
                Some(c) => Some(ClassifierParams {
                    w1: map(c.w1)?,
                    c1: map(c.c1)?,
                    w2: map(c.w2)?,
                    c2: map(c.c2)?,
                }),
                None => None,
            },
        })
    }
}

/// Parameters plus the switches that shape the forward pass.
#[derive(Debug, Clone)]
pub struct Model {
    pub shape: ModelShape,
    pub store: ParamStore,
    pub layout: ParamLayout,
    pub space: Space,
    pub ablation: Ablation,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Final `[CLS]` points, `docs x (n+1)`.
    pub d: Var,
    /// Distributions computed from `d`.
    pub topics: TopicOutputs,
    /// Topic points, `T x (n+1)`, breadth-first.
    pub z: Var,
    /// Level points, `H x (n+1)`.
    pub zl: Var,
}

/// Per-document outputs of [`Model::infer`], row-aligned with the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub d: Mat,
    pub theta: Mat,
    pub pi: Mat,
    pub delta: Mat,
    /// Topic points used, breadth-first.
    pub z: Mat,
}

impl Model {
    pub fn new(shape: ModelShape, seed: u64, k: Curvature, ablation: Ablation) -> Self {
        let (store, layout) = ParamLayout::init(&shape, seed);
        Self::from_parts(shape, store, layout, k, ablation)
    }

    pub fn from_parts(
        shape: ModelShape,
        store: ParamStore,
        layout: ParamLayout,
        k: Curvature,
        ablation: Ablation,
    ) -> Self {
        let space = if ablation.euclidean {
            Space::Euclidean
        } else {
            Space::Hyperbolic(k)
        };
        Self {
            shape,
            store,
            layout,
            space,
            ablation,
        }
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::new(self.space)
    }

    /// Truncates a token sequence to the position table.
    pub fn clip<'d>(&self, doc: &'d [usize]) -> &'d [usize] {
        &doc[..doc.len().min(self.shape.max_len)]
    }

    /// Topic and level points for `tree`.
    pub fn tree_points<'a>(&'a self, tape: &mut Tape<'a>, tree: &TreeLayout) -> (Var, Var) {
        let z = drnn::topic_embeddings(tape, &self.store, self.layout.drnn, tree);
        let zl = drnn::level_embeddings(
            tape,
            &self.store,
            self.layout.level,
            self.layout.drnn.init_state,
            tree.depth,
        );
        (z, zl)
    }

    /// Topic points alone, breadth-first (`T x (n+1)`).
    pub fn topic_points(&self, tree: &TreeLayout) -> Mat {
        let mut tape = self.tape();
        let z = drnn::topic_embeddings(&mut tape, &self.store, self.layout.drnn, tree);
        tape.value(z).clone()
    }

    /// Tree and graph tokens injected into the next layer for the first
    /// `m` rows of `d`; `neighbors` index rows of `d`.
    fn injections<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        d: Var,
        m: usize,
        neighbors: &[Vec<usize>],
        tree: &TreeLayout,
        z: Var,
        zl: Var,
    ) -> Vec<Var> {
        let own: Vec<usize> = (0..m).collect();
        let rows = tape.value(d).nrows();
        let mut out = Vec::with_capacity(2);
        if !self.ablation.no_tree_injection {
            let dm = if rows == m { d } else { tape.gather_rows(d, &own) };
            out.push(doc_topics(tape, dm, z, zl, tree).e);
        }
        if !self.ablation.no_graph_injection {
            let mut nb = neighbors.to_vec();
            nb.resize(rows, Vec::new());
            let g = graph_attn::graph_embeddings(tape, &self.store, self.layout.graph, d, nb);
            out.push(if rows == m { g } else { tape.gather_rows(g, &own) });
        }
        out
    }

    /// Full nested encoding of `docs` on one tape. `neighbors[i]` lists
    /// indices into `docs` whose `[CLS]` states feed document `i`'s graph
    /// attention at every layer.
    pub fn encode<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tree: &TreeLayout,
        docs: &[&[usize]],
        neighbors: &[Vec<usize>],
    ) -> Forward {
        let heads = self.shape.heads();
        let clipped: Vec<&[usize]> = docs.iter().map(|d| self.clip(d)).collect();
        let (z, zl) = self.tree_points(tape, tree);
        let (mut x, packed) = transformer::embed(tape, &self.store, self.layout.embed, &clipped);
        let cls = packed.cls_rows();
        let m = docs.len();
        for (l, lp) in self.layout.layers.iter().enumerate() {
            let extras = if l == 0 {
                Vec::new()
            } else {
                let d = tape.gather_rows(x, &cls);
                self.injections(tape, d, m, neighbors, tree, z, zl)
            };
            x = transformer::layer(tape, &self.store, lp, heads, x, &packed, &extras);
        }
        let d = tape.gather_rows(x, &cls);
        let topics = doc_topics(tape, d, z, zl, tree);
        Forward { d, topics, z, zl }
    }

    /// Layer-synchronous inference over a corpus. Every layer is computed
    /// for all documents (in chunks of `chunk`) before the next one, so
    /// graph attention always reads the neighbors' current-layer states.
    pub fn infer(
        &self,
        tree: &TreeLayout,
        docs: &[Vec<usize>],
        neighbors: &[Vec<usize>],
        exec: Exec,
        chunk: usize,
    ) -> Inference {
        let chunk = chunk.max(1);
        let n_docs = docs.len();
        let (z_val, zl_val) = {
            let mut tape = self.tape();
            let (z, zl) = self.tree_points(&mut tape, tree);
            (tape.value(z).clone(), tape.value(zl).clone())
        };
        let starts: Vec<usize> = (0..n_docs).step_by(chunk).collect();
        let heads = self.shape.heads();

        // Layer 1 including the embedding.
        let mut states: Vec<Mat> = exec
            .map(&starts, |&s0| {
                let s1 = (s0 + chunk).min(n_docs);
                let batch: Vec<&[usize]> = docs[s0..s1].iter().map(|d| self.clip(d)).collect();
                let mut tape = self.tape();
                let (x, packed) = transformer::embed(&mut tape, &self.store, self.layout.embed, &batch);
                let y = transformer::layer(&mut tape, &self.store, &self.layout.layers[0], heads, x, &packed, &[]);
                split_rows(tape.value(y), &packed)
            })
            .into_iter()
            .flatten()
            .collect();

        for lp in &self.layout.layers[1..] {
            let cls = cls_matrix(&states);
            states = exec
                .map(&starts, |&s0| {
                    let s1 = (s0 + chunk).min(n_docs);
                    let mut tape = self.tape();
                    // Local rows: the chunk's documents, then outside neighbors.
                    let mut local: Vec<usize> = (s0..s1).collect();
                    let mut local_nb = Vec::with_capacity(s1 - s0);
                    for i in s0..s1 {
                        let nb = neighbors.get(i).map_or(&[][..], |v| &v[..]);
                        let mut li = Vec::with_capacity(nb.len());
                        for &j in nb {
                            let pos = match local.iter().position(|&r| r == j) {
                                Some(p) => p,
                                None => {
                                    local.push(j);
                                    local.len() - 1
                                }
                            };
                            li.push(pos);
                        }
                        local_nb.push(li);
                    }
                    let d_local = gather(&cls, &local);
                    let d = tape.constant(d_local);
                    let (z, zl) = (tape.constant(z_val.clone()), tape.constant(zl_val.clone()));
                    let extras = self.injections(&mut tape, d, s1 - s0, &local_nb, tree, z, zl);
                    let packed = Packed::new(states[s0..s1].iter().map(|m| m.nrows()).collect());
                    let x = tape.constant(stack(&states[s0..s1]));
                    let y = transformer::layer(&mut tape, &self.store, lp, heads, x, &packed, &extras);
                    split_rows(tape.value(y), &packed)
                })
                .into_iter()
                .flatten()
                .collect();
        }

        let d_all = cls_matrix(&states);
        let parts = exec.map(&starts, |&s0| {
            let s1 = (s0 + chunk).min(n_docs);
            let mut tape = self.tape();
            let d = tape.constant(d_all.slice(s![s0..s1, ..]).to_owned());
            let (z, zl) = (tape.constant(z_val.clone()), tape.constant(zl_val.clone()));
            let t = doc_topics(&mut tape, d, z, zl, tree);
            (
                tape.value(t.theta).clone(),
                tape.value(t.pi).clone(),
                tape.value(t.delta).clone(),
            )
        });
        let cat = |sel: fn(&(Mat, Mat, Mat)) -> &Mat, cols: usize| -> Mat {
            let views: Vec<_> = parts.iter().map(|p| sel(p).view()).collect();
            if views.is_empty() {
                Array2::zeros((0, cols))
            } else {
                ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform columns")
            }
        };
        Inference {
            theta: cat(|p| &p.0, tree.len()),
            pi: cat(|p| &p.1, tree.leaves.len()),
            delta: cat(|p| &p.2, tree.depth),
            d: d_all,
            z: z_val,
        }
    }

    /// Topic-word matrix `beta^T` (`T x |V|`, rows sum to 1) for topic points.
    pub fn topic_word_rows(&self, z: &Mat) -> Mat {
        let mut tape = self.tape();
        let zv = tape.constant(z.clone());
        let b = crate::objective::topic_word(&mut tape, &self.store, self.layout.decoder, zv);
        tape.value(b).clone()
    }
}

fn split_rows(m: &Mat, packed: &Packed) -> Vec<Mat> {
    packed
        .offsets
        .iter()
        .zip(&packed.lens)
        .map(|(&o, &l)| m.slice(s![o..o + l, ..]).to_owned())
        .collect()
}

fn stack(parts: &[Mat]) -> Mat {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform columns")
}

fn cls_matrix(states: &[Mat]) -> Mat {
    let cols = states.first().map_or(0, |m| m.ncols());
    let mut out = Array2::zeros((states.len(), cols));
    for (i, m) in states.iter().enumerate() {
        out.row_mut(i).assign(&m.row(0));
    }
    out
}

fn gather(m: &Mat, rows: &[usize]) -> Mat {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&m.row(r));
    }
    out
}
