//! Mini-batch training with in-batch contrastive negatives, Adam, and
//! per-epoch topic-tree updates.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::corpus::{DocumentGraph, Split};
use crate::doc_topic::TreeLayout;
use crate::exec::Exec;
use crate::geometry::Curvature;
use crate::model::{Model, ModelShape};
use crate::objective::{self, LossWeights};
use crate::params::Adam;
use crate::tape::{ContrastItem, Tape, Var};
use crate::tree::{topic_word_mass, ChangeLog, TopicTree};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("{0}")]
    Setup(String),
}

/// Mean losses of one epoch plus the tree edits made after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub graph_loss: f64,
    pub topic_loss: f64,
    pub sup_loss: Option<f64>,
    pub total_loss: f64,
    pub topics: usize,
    pub tree_changes: ChangeLog,
}

/// Chunk size used when the trainer runs inference.
pub const INFER_CHUNK: usize = 32;

/// Initial tree for a config: the configured complete tree, or a two-level
/// tree with the same number of topics when the flat ablation is on.
pub fn initial_tree(cfg: &RunConfig) -> TopicTree {
    let full = TopicTree::init(cfg.model.levels, cfg.model.branching).expect("validated shape");
    if cfg.ablation.flat_tree {
        TopicTree::init(2, (full.len() - 1).max(1)).expect("flat shape")
    } else {
        full
    }
}

/// Neighbor lists capped at `max` (lowest ids first).
pub fn cap_neighbors(adj: &[Vec<usize>], max: usize) -> Vec<Vec<usize>> {
    adj.iter().map(|a| a.iter().copied().take(max).collect()).collect()
}

/// One optimisation batch. Rows `0..centers` of `docs` are the centers;
/// the rest are sampled neighbors. `neighbors`, `items` and `labels` index
/// rows of `docs`.
#[derive(Debug, Clone)]
pub struct Batch<'d> {
    pub docs: Vec<&'d [usize]>,
    pub neighbors: Vec<Vec<usize>>,
    pub centers: usize,
    pub items: Vec<ContrastItem>,
    /// Bags of words of the centers.
    pub counts: Vec<Vec<(usize, f64)>>,
    /// `(center row, label)` for labelled centers.
    pub labels: Vec<(usize, usize)>,
}

/// Tape handles of a batch's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub graph: Var,
    pub topic: Var,
    pub sup: Option<Var>,
    pub total: Var,
}

/// Training objective of one batch: contrastive loss averaged over items,
/// topic NLL averaged over centers, and (when the model has a classifier)
/// cross-entropy averaged over labelled centers.
pub fn batch_loss<'a>(
    model: &'a Model,
    tape: &mut Tape<'a>,
    layout: &TreeLayout,
    batch: &Batch<'_>,
    weights: LossWeights,
) -> BatchLoss {
    let nc = batch.centers;
    let f = model.encode(tape, layout, &batch.docs, &batch.neighbors);
    let center_rows: Vec<usize> = (0..nc).collect();
    let dc = tape.gather_rows(f.d, &center_rows);

    let n_items = batch.items.len();
    let graph = if n_items == 0 {
        tape.constant(ndarray::Array2::zeros((1, 1)))
    } else {
        let sqd = tape.sq_dist_matrix(dc, f.d);
        let sum = objective::graph_loss(tape, sqd, batch.items.clone(), weights.tau);
        tape.scale(sum, 1.0 / n_items as f64)
    };

    let beta = objective::topic_word(tape, &model.store, model.layout.decoder, f.z);
    let theta_c = tape.gather_rows(f.topics.theta, &center_rows);
    let dhat = objective::reconstruct(tape, theta_c, beta);
    let topic_sum = objective::topic_loss(tape, dhat, &batch.counts);
    let topic = tape.scale(topic_sum, 1.0 / nc as f64);

    let sup = match model.layout.classifier {
        Some(cp) if !batch.labels.is_empty() => {
            let rows: Vec<usize> = batch.labels.iter().map(|p| p.0).collect();
            let d_l = tape.gather_rows(dc, &rows);
            let logits = objective::classifier_logits(tape, &model.store, cp, d_l);
            let xent = objective::supervised_loss(tape, logits, batch.labels.iter().map(|p| p.1).collect());
            Some(tape.scale(xent, 1.0 / batch.labels.len() as f64))
        }
        _ => None,
    };
    let total = objective::total_loss(tape, graph, topic, sup, weights);
    BatchLoss {
        graph,
        topic,
        sup,
        total,
    }
}

pub struct Trainer<'g> {
    cfg: RunConfig,
    graph: &'g DocumentGraph,
    split: Split,
    /// Train-train adjacency over document indices.
    train_adj: Vec<Vec<usize>>,
    model: Model,
    tree: TopicTree,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    exec: Exec,
}

impl<'g> Trainer<'g> {
    pub fn new(cfg: &RunConfig, graph: &'g DocumentGraph, split: Split, exec: Exec) -> Result<Self, TrainError> {
        if split.train.len() < 2 {
            return Err(TrainError::Setup("training needs at least 2 documents".into()));
        }
        if graph.vocab.is_empty() {
            return Err(TrainError::Setup("empty vocabulary".into()));
        }
        if cfg.loss.supervised && !graph.has_labels() {
            return Err(TrainError::Setup("supervised mode needs labelled documents".into()));
        }
        let parts = split.parts(graph.len());
        let train_adj = graph.adjacency(|i| parts[i] == crate::corpus::Part::Train);
        let shape = ModelShape::from_config(cfg, graph.vocab.len(), graph.labels.len());
        let k = Curvature::new(cfg.model.curvature).map_err(|e| TrainError::Setup(e.to_string()))?;
        let model = Model::new(shape, cfg.optim.seed, k, cfg.ablation);
        Ok(Self {
            tree: initial_tree(cfg),
            adam: Adam::new(cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2),
            rng: ChaCha8Rng::seed_from_u64(cfg.optim.seed ^ 0x9e37_79b9_7f4a_7c15),
            cfg: cfg.clone(),
            graph,
            split,
            train_adj,
            model,
            epoch: 0,
            exec,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn tree(&self) -> &TopicTree {
        &self.tree
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// One pass over the training documents followed by a tree update
    /// (unless the tree is fixed).
    pub fn run_epoch(&mut self) -> Result<EpochStats, TrainError> {
        self.epoch += 1;
        let mut order = self.split.train.clone();
        order.shuffle(&mut self.rng);
        let (mut g, mut t, mut s, mut tot) = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0;
        for (step, batch) in order.chunks(self.cfg.loss.batch_size).enumerate() {
            let l = self.step(batch, step)?;
            g += l.0;
            t += l.1;
            s += l.2.unwrap_or(0.0);
            tot += l.3;
            steps += 1;
        }
        let changes = if self.cfg.ablation.fixed_tree {
            ChangeLog::default()
        } else {
            self.update_tree()
        };
        let n = steps.max(1) as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            steps,
            graph_loss: g / n,
            topic_loss: t / n,
            sup_loss: self.model.layout.classifier.map(|_| s / n),
            total_loss: tot / n,
            topics: self.tree.len(),
            tree_changes: changes,
        })
    }

    /// Loss parts of one optimisation step: graph, topic, supervised, total.
    fn step(&mut self, centers: &[usize], step: usize) -> Result<(f64, f64, Option<f64>, f64), TrainError> {
        let max_nb = self.cfg.loss.max_neighbors;
        let nc = centers.len();
        let mut members: Vec<usize> = centers.to_vec();
        let mut local: HashMap<usize, usize> = centers.iter().enumerate().map(|(i, &c)| (c, i)).collect();

        let mut sampled: Vec<Vec<usize>> = Vec::with_capacity(nc);
        for &c in centers {
            let pick: Vec<usize> = self.train_adj[c]
                .choose_multiple(&mut self.rng, max_nb)
                .copied()
                .collect();
            for &j in &pick {
                local.entry(j).or_insert_with(|| {
                    members.push(j);
                    members.len() - 1
                });
            }
            sampled.push(pick);
        }
        let mut neighbors: Vec<Vec<usize>> = sampled.iter().map(|p| p.iter().map(|j| local[j]).collect()).collect();
        for &m in &members[nc..] {
            neighbors.push(
                self.train_adj[m]
                    .iter()
                    .filter_map(|j| local.get(j).copied())
                    .take(max_nb)
                    .collect(),
            );
        }

        let mut items = Vec::new();
        for (i, &c) in centers.iter().enumerate() {
            let Some(&pos) = sampled[i].choose(&mut self.rng) else {
                continue;
            };
            let negatives: Vec<usize> = (0..nc)
                .filter(|&j| j != i && centers[j] != pos && self.train_adj[c].binary_search(&centers[j]).is_err())
                .collect();
            items.push(ContrastItem {
                row: i,
                positive: local[&pos],
                negatives,
            });
        }

        let layout = TreeLayout::new(&self.tree);
        let batch = Batch {
            docs: members.iter().map(|&m| self.graph.docs[m].tokens.as_slice()).collect(),
            neighbors,
            centers: nc,
            items,
            counts: centers.iter().map(|&c| self.graph.counts(c)).collect(),
            labels: centers
                .iter()
                .enumerate()
                .filter_map(|(i, &c)| self.graph.label(c).map(|l| (i, l)))
                .collect(),
        };
        let weights = LossWeights {
            lambda_topic: self.cfg.loss.lambda_topic,
            lambda_sup: self.cfg.loss.lambda_sup,
            tau: self.cfg.loss.tau,
        };
        let model = &self.model;
        let mut tape = model.tape();
        let BatchLoss {
            graph: graph_loss,
            topic: topic_loss,
            sup: sup_loss,
            total,
        } = batch_loss(model, &mut tape, &layout, &batch, weights);

        let values = (
            tape.scalar(graph_loss),
            tape.scalar(topic_loss),
            sup_loss.map(|v| tape.scalar(v)),
        );
        let err = |term| TrainError::NonFinite {
            term,
            epoch: self.epoch,
            step,
        };
        if !values.0.is_finite() {
            return Err(err("graph"));
        }
        if !values.1.is_finite() {
            return Err(err("topic"));
        }
        if values.2.is_some_and(|v| !v.is_finite()) {
            return Err(err("supervised"));
        }
        let total_value = tape.scalar(total);
        let grads = tape.backward(total);
        if grads.params().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(err("gradient"));
        }
        let updates: Vec<_> = grads.params().map(|(id, g)| (id, g.clone())).collect();
        drop(tape);
        self.adam
            .step(&mut self.model.store, updates.iter().map(|(id, g)| (*id, g)));
        Ok((values.0, values.1, values.2, total_value))
    }

    /// Recomputes topic word mass over the training documents and applies
    /// the growth / pruning rules.
    fn update_tree(&mut self) -> ChangeLog {
        let layout = TreeLayout::new(&self.tree);
        let docs: Vec<Vec<usize>> = self
            .split
            .train
            .iter()
            .map(|&i| self.graph.docs[i].tokens.clone())
            .collect();
        let pos: HashMap<usize, usize> = self.split.train.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let adj: Vec<Vec<usize>> = self
            .split
            .train
            .iter()
            .map(|&i| {
                self.train_adj[i]
                    .iter()
                    .map(|j| pos[j])
                    .take(self.cfg.loss.max_neighbors)
                    .collect()
            })
            .collect();
        let inf = self.model.infer(&layout, &docs, &adj, self.exec, INFER_CHUNK);
        let lengths: Vec<f64> = docs.iter().map(|d| d.len() as f64).collect();
        let rows: Vec<Vec<f64>> = inf.theta.rows().into_iter().map(|r| r.to_vec()).collect();
        let mass = topic_word_mass(&rows, &lengths);
        let by_id: HashMap<_, _> = layout.order.iter().copied().zip(mass).collect();
        self.tree.update(&by_id, self.cfg.tree.s_add, self.cfg.tree.s_prune)
    }

    /// Consumes the trainer, returning the model and tree.
    pub fn into_parts(self) -> (Model, TopicTree) {
        (self.model, self.tree)
    }
}
