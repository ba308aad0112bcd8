//! Command-line surface: argument parsing, config resolution and the
//! `train`, `eval`, `infer`, `export-tree` and `synth` commands.
//!
//! Config precedence, lowest first: defaults, `--config` file, flags,
//! `--set key=value`. The output directory can additionally be overridden
//! by `HYPERTOPIC_OUTPUT_DIR` (and `--output-dir` over that); the rayon
//! worker count comes from `HYPERTOPIC_THREADS`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{self, load_corpus, load_corpus_with, Split};
use crate::doc_topic::TreeLayout;
use crate::exec::Exec;
use crate::pipeline;
use crate::synth;
use crate::train::Trainer;
use crate::Error;

pub const OUTPUT_DIR_ENV: &str = "HYPERTOPIC_OUTPUT_DIR";
pub const THREADS_ENV: &str = "HYPERTOPIC_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "hypertopic",
    version,
    about = "Hierarchical graph topic modeling in hyperbolic space"
)]
pub struct Cli {
    /// Directory for all artifacts (overrides config and environment).
    #[arg(long, global = true, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    /// Config overrides with dotted keys, e.g. `--set optim.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes the checkpoint, epoch log and tree-change log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of its corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Embed documents with a trained model.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `id<TAB>[label<TAB>]text` lines.
        #[arg(long)]
        docs: PathBuf,
        /// Optional links among the given documents.
        #[arg(long)]
        edges: Option<PathBuf>,
    },
    /// Write the topic tree with each topic's top words.
    ExportTree {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        top_k: usize,
    },
    /// Write a seeded synthetic corpus (`docs.tsv`, `edges.txt`).
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::Branch)]
        kind: SynthKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Branch,
    Ds,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key=value` or JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub docs: Option<PathBuf>,
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// Two-level tree with the same number of topics.
    #[arg(long)]
    pub flat_tree: bool,
    /// Never grow or prune the tree.
    #[arg(long)]
    pub fixed_tree: bool,
    /// Euclidean maps and distances instead of hyperbolic ones.
    #[arg(long)]
    pub euclidean: bool,
    #[arg(long)]
    pub no_tree_injection: bool,
    #[arg(long)]
    pub no_graph_injection: bool,
    /// Add the label cross-entropy term.
    #[arg(long)]
    pub supervised: bool,
}

impl TrainArgs {
    pub fn resolve(&self, set: &[String]) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.docs {
            cfg.paths.docs = Some(d.clone());
        }
        if let Some(e) = &self.edges {
            cfg.paths.edges = Some(e.clone());
        }
        let a = &mut cfg.ablation;
        a.flat_tree |= self.flat_tree;
        a.fixed_tree |= self.fixed_tree;
        a.euclidean |= self.euclidean;
        a.no_tree_injection |= self.no_tree_injection;
        a.no_graph_injection |= self.no_graph_injection;
        cfg.loss.supervised |= self.supervised;
        cfg.with_overrides(set)
    }
}

/// One node of an exported tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeNodeExport {
    pub id: usize,
    pub level: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeExport {
    pub nodes: Vec<TreeNodeExport>,
}

#[derive(Debug, Serialize)]
struct InferRow<'a> {
    id: &'a str,
    d: Vec<f64>,
    theta: Vec<f64>,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    rows.into_iter()
        .map(|r| serde_json::to_string(&r).expect("row serializes") + "\n")
        .collect()
}

fn env_output_dir() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

/// Applies `HYPERTOPIC_THREADS` if set.
pub fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        Error::Config(ConfigError::Invalid(format!(
            "{THREADS_ENV} must be a thread count, got {v:?}"
        )))
    })?;
    if !crate::exec::set_threads(n) {
        log::warn!("thread pool already initialised; ignoring {THREADS_ENV}");
    }
    Ok(())
}

/// Only evaluation and path settings may change once a model is trained.
fn checkpoint_config(ck: &Checkpoint, set: &[String]) -> Result<RunConfig, ConfigError> {
    if let Some(bad) = set
        .iter()
        .find(|kv| !(kv.starts_with("eval.") || kv.starts_with("paths.")))
    {
        return Err(ConfigError::Invalid(format!(
            "{bad:?}: only eval.* and paths.* can be overridden for a trained model"
        )));
    }
    ck.config.with_overrides(set)
}

fn beside(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), Error> {
    init_threads()?;
    let exec = Exec::default();
    let pick_dir = |fallback: PathBuf| cli.output_dir.clone().or_else(env_output_dir).unwrap_or(fallback);
    let say = |out: &mut dyn Write, msg: String| {
        writeln!(out, "{msg}").map_err(|source| Error::Io {
            path: PathBuf::from("<stdout>"),
            source,
        })
    };

    match &cli.command {
        Command::Train(args) => {
            let mut cfg = args.resolve(&cli.set)?;
            let dir = pick_dir(cfg.paths.output_dir.clone());
            cfg.paths.output_dir = dir.clone();
            let docs =
                cfg.paths.docs.clone().ok_or_else(|| {
                    ConfigError::Invalid("paths.docs is required for training (or pass --docs)".into())
                })?;
            let graph = load_corpus(&docs, cfg.paths.edges.as_deref(), &cfg.corpus)?;
            let split = Split::new(graph.len(), cfg.corpus.split, cfg.corpus.split_seed);
            write_file(&dir.join("config.json"), cfg.to_json_pretty() + "\n")?;
            write_file(
                &dir.join("split.json"),
                serde_json::to_string(&split).expect("split serializes") + "\n",
            )?;

            let mut trainer = Trainer::new(&cfg, &graph, split, exec)?;
            let (mut epochs, mut changes) = (String::new(), String::new());
            for _ in 0..cfg.optim.epochs {
                let stats = match trainer.run_epoch() {
                    Ok(s) => s,
                    Err(e) => {
                        write_file(&dir.join("epochs.jsonl"), &epochs)?;
                        return Err(e.into());
                    }
                };
                log::info!(
                    "epoch {} loss {:.4} (graph {:.4}, topic {:.4}) topics {}",
                    stats.epoch,
                    stats.total_loss,
                    stats.graph_loss,
                    stats.topic_loss,
                    stats.topics
                );
                epochs += &jsonl([&stats]);
                changes += &jsonl([serde_json::json!({ "epoch": stats.epoch, "changes": stats.tree_changes })]);
                write_file(&dir.join("epochs.jsonl"), &epochs)?;
                write_file(&dir.join("tree_changes.jsonl"), &changes)?;
                let ck = Checkpoint::capture(
                    trainer.model(),
                    trainer.tree(),
                    &cfg,
                    &graph.vocab,
                    &graph.labels,
                    stats.epoch,
                );
                ck.save(&dir.join("checkpoint.json"))?;
            }
            say(
                out,
                format!("trained {} epochs; artifacts in {}", cfg.optim.epochs, dir.display()),
            )
        }

        Command::Eval { checkpoint } => {
            let ck = Checkpoint::load(checkpoint)?;
            let cfg = checkpoint_config(&ck, &cli.set)?;
            let dir = pick_dir(beside(checkpoint));
            let docs = cfg
                .paths
                .docs
                .clone()
                .ok_or_else(|| ConfigError::Invalid("checkpoint config has no paths.docs".into()))?;
            let graph = load_corpus_with(&docs, cfg.paths.edges.as_deref(), &cfg.corpus, Some(ck.vocab()))?;
            let split = Split::new(graph.len(), cfg.corpus.split, cfg.corpus.split_seed);
            let model = ck.model()?;
            let report = pipeline::evaluate(&model, &ck.tree, &graph, &split, &cfg, exec);
            write_file(&dir.join("eval").join("config.json"), cfg.to_json_pretty() + "\n")?;
            write_file(&dir.join("eval").join("report.json"), report.to_json() + "\n")?;
            write_file(&dir.join("eval").join("report.tsv"), report.to_table())?;
            say(out, report.to_table().trim_end().to_string())
        }

        Command::Infer {
            checkpoint,
            docs,
            edges,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            let cfg = checkpoint_config(&ck, &cli.set)?;
            let dir = pick_dir(beside(checkpoint));
            let records = corpus::parse_documents(docs)?;
            let ids: std::collections::HashMap<String, usize> =
                records.iter().enumerate().map(|(i, r)| (r.0.clone(), i)).collect();
            let vocab = ck.vocab();
            let tokens: Vec<Vec<usize>> = records.iter().map(|r| vocab.encode(&corpus::tokenize(&r.2))).collect();
            let links = match edges {
                Some(p) => corpus::parse_edges(p, &ids)?,
                None => Default::default(),
            };
            let mut neighbors = vec![Vec::new(); records.len()];
            for &(i, j) in &links {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
            let neighbors = crate::train::cap_neighbors(&neighbors, cfg.loss.max_neighbors);
            let model = ck.model()?;
            let layout = TreeLayout::new(&ck.tree);
            let inf = model.infer(&layout, &tokens, &neighbors, exec, crate::train::INFER_CHUNK);
            let rows = records.iter().enumerate().map(|(i, r)| InferRow {
                id: &r.0,
                d: inf.d.row(i).to_vec(),
                theta: inf.theta.row(i).to_vec(),
            });
            let topics = serde_json::json!({ "topics": layout.order });
            write_file(&dir.join("infer").join("config.json"), cfg.to_json_pretty() + "\n")?;
            write_file(&dir.join("infer").join("topics.json"), topics.to_string() + "\n")?;
            write_file(&dir.join("infer").join("documents.jsonl"), jsonl(rows))?;
            say(
                out,
                format!(
                    "embedded {} documents into {}",
                    records.len(),
                    dir.join("infer").display()
                ),
            )
        }

        Command::ExportTree { checkpoint, top_k } => {
            let ck = Checkpoint::load(checkpoint)?;
            let cfg = checkpoint_config(&ck, &cli.set)?;
            let dir = pick_dir(beside(checkpoint));
            let nodes = export_tree(&ck, *top_k)?;
            let doc = serde_json::to_string_pretty(&TreeExport { nodes }).expect("tree serializes");
            write_file(&dir.join("tree").join("config.json"), cfg.to_json_pretty() + "\n")?;
            write_file(&dir.join("tree").join("tree.json"), doc.clone() + "\n")?;
            say(out, doc)
        }

        Command::Synth { kind, seed } => {
            let dir = pick_dir(PathBuf::from("synth"));
            let c = match kind {
                SynthKind::Branch => synth::branch_corpus(*seed),
                SynthKind::Ds => synth::ds_corpus(*seed),
            };
            let (docs, edges) = c.write(&dir).map_err(|source| Error::Io {
                path: dir.clone(),
                source,
            })?;
            let mut cfg = RunConfig::default();
            cfg.paths.docs = Some(docs.clone());
            cfg.paths.edges = Some(edges.clone());
            write_file(&dir.join("config.json"), cfg.to_json_pretty() + "\n")?;
            say(out, format!("wrote {} and {}", docs.display(), edges.display()))
        }
    }
}

/// Nodes breadth-first with children in stick-breaking order and the
/// top-`k` words of each topic.
pub fn export_tree(ck: &Checkpoint, top_k: usize) -> Result<Vec<TreeNodeExport>, Error> {
    let model = ck.model()?;
    let layout = TreeLayout::new(&ck.tree);
    let beta_t = model.topic_word_rows(&model.topic_points(&layout));
    let vocab = ck.vocab();
    let words = pipeline::top_word_ids(&beta_t, top_k);
    Ok(layout
        .order
        .iter()
        .zip(words)
        .map(|(&id, w)| {
            let node = ck.tree.node(id).expect("layout node");
            TreeNodeExport {
                id,
                level: node.level,
                parent: node.parent,
                children: node.children.clone(),
                words: w.into_iter().map(|i| vocab.word(i).to_string()).collect(),
            }
        })
        .collect())
}
