//! Seeded synthetic corpora.
//!
//! * [`branch_corpus`]: two latent branches, each with two sub-topics;
//!   links join documents of the same sub-topic. Small enough to train
//!   in minutes on one core.
//! * [`ds_corpus`]: a citation-graph-shaped corpus with 1,703 documents,
//!   3,234 links and 9 labels, for protocol and scale checks.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::config::CorpusConfig;
use crate::corpus::DocumentGraph;

/// Raw records (`id`, label, text) plus links by record index.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<(String, Option<String>, String)>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl SynthCorpus {
    pub fn graph(&self, cfg: &CorpusConfig) -> DocumentGraph {
        DocumentGraph::from_records(self.records.clone(), self.edges.clone(), cfg)
    }

    /// Writes `docs.tsv` (`id<TAB>label<TAB>text`) and `edges.txt` into
    /// `dir`, returning both paths.
    pub fn write(&self, dir: &Path) -> std::io::Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let docs = dir.join("docs.tsv");
        let edges = dir.join("edges.txt");
        let mut f = std::io::BufWriter::new(fs::File::create(&docs)?);
        for (id, label, text) in &self.records {
            match label {
                Some(l) => writeln!(f, "{id}\t{l}\t{text}")?,
                None => writeln!(f, "{id}\t{text}")?,
            }
        }
        f.flush()?;
        let mut f = std::io::BufWriter::new(fs::File::create(&edges)?);
        for &(i, j) in &self.edges {
            writeln!(f, "{} {}", self.records[i].0, self.records[j].0)?;
        }
        f.flush()?;
        Ok((docs, edges))
    }
}

pub const BRANCH_DOCS: usize = 200;
const BRANCH_GENERAL_WORDS: usize = 10;
const BRANCH_CORE_WORDS: usize = 5;
const BRANCH_SUB_WORDS: usize = 20;
const BRANCH_LEN: (usize, usize) = (28, 36);
const BRANCH_GENERAL_P: f64 = 0.1;
const BRANCH_CORE_P: f64 = 0.2;
const BRANCH_LINKS: usize = 3;

/// Label of a branch-corpus document.
pub fn branch_label(branch: usize) -> String {
    format!("branch{branch}")
}

/// 200 documents over a 100-word vocabulary. Each document belongs to one
/// of two branches and one of that branch's two sub-topics (50 per
/// sub-topic). Tokens come from 10 general words (10%), the branch's 5 core
/// words (20%) or the sub-topic's own 20 words (70%), each pool Zipf-skewed.
/// Every document links to 3 random documents of the same sub-topic.
pub fn branch_corpus(seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = |n: usize| Zipf::new(n as u64, 1.0).expect("valid zipf");
    let (zg, zc, zs) = (
        zipf(BRANCH_GENERAL_WORDS),
        zipf(BRANCH_CORE_WORDS),
        zipf(BRANCH_SUB_WORDS),
    );
    let names = ["alpha", "beta"];

    let mut latent: Vec<(usize, usize)> = (0..BRANCH_DOCS).map(|i| (i % 2, (i / 2) % 2)).collect();
    latent.shuffle(&mut rng);

    let mut records = Vec::with_capacity(BRANCH_DOCS);
    for (i, &(b, s)) in latent.iter().enumerate() {
        let len = rng.gen_range(BRANCH_LEN.0..=BRANCH_LEN.1);
        let words: Vec<String> = (0..len)
            .map(|_| {
                let u: f64 = rng.gen();
                if u < BRANCH_GENERAL_P {
                    format!("common{}", zg.sample(&mut rng) as usize - 1)
                } else if u < BRANCH_GENERAL_P + BRANCH_CORE_P {
                    format!("{}core{}", names[b], zc.sample(&mut rng) as usize - 1)
                } else {
                    format!("{}{s}w{:02}", names[b], zs.sample(&mut rng) as usize - 1)
                }
            })
            .collect();
        records.push((format!("doc{i:03}"), Some(branch_label(b)), words.join(" ")));
    }

    let mut edges = BTreeSet::new();
    for (i, &l) in latent.iter().enumerate() {
        let same: Vec<usize> = (0..BRANCH_DOCS).filter(|&j| j != i && latent[j] == l).collect();
        for &j in same.choose_multiple(&mut rng, BRANCH_LINKS) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    SynthCorpus { records, edges }
}

pub const DS_DOCS: usize = 1703;
pub const DS_LINKS: usize = 3234;
pub const DS_LABELS: usize = 9;
const DS_CLASS_WORDS: usize = 60;
const DS_GENERAL_WORDS: usize = 120;
const DS_LEN: (usize, usize) = (20, 60);
const DS_GENERAL_P: f64 = 0.4;
const DS_SAME_CLASS_P: f64 = 0.8;

/// 1,703 labelled documents in 9 classes with exactly 3,234 distinct
/// undirected links, 80% of them within a class.
pub fn ds_corpus(seed: u64) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_words: Vec<Vec<String>> = (0..DS_LABELS)
        .map(|c| (0..DS_CLASS_WORDS).map(|i| format!("c{c}w{i:02}")).collect())
        .collect();
    let general: Vec<String> = (0..DS_GENERAL_WORDS).map(|i| format!("term{i:03}")).collect();

    let class: Vec<usize> = (0..DS_DOCS).map(|_| rng.gen_range(0..DS_LABELS)).collect();
    let mut members = vec![Vec::new(); DS_LABELS];
    for (i, &c) in class.iter().enumerate() {
        members[c].push(i);
    }
    let records = class
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let len = rng.gen_range(DS_LEN.0..=DS_LEN.1);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    // Zipf-like skew: squaring a uniform favors low indices.
                    let u: f64 = rng.gen::<f64>().powi(2);
                    if rng.gen::<f64>() < DS_GENERAL_P {
                        general[(u * DS_GENERAL_WORDS as f64) as usize].as_str()
                    } else {
                        class_words[c][(u * DS_CLASS_WORDS as f64) as usize].as_str()
                    }
                })
                .collect();
            (format!("paper{i:04}"), Some(format!("class{c}")), words.join(" "))
        })
        .collect();

    let mut edges = BTreeSet::new();
    while edges.len() < DS_LINKS {
        let i = rng.gen_range(0..DS_DOCS);
        let j = if rng.gen::<f64>() < DS_SAME_CLASS_P {
            *members[class[i]].choose(&mut rng).expect("non-empty class")
        } else {
            rng.gen_range(0..DS_DOCS)
        };
        if i != j {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    SynthCorpus { records, edges }
}
