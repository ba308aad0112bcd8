//! Corpus and graph ingestion.
//!
//! Documents: one record per line, either tab-separated `id<TAB>text` /
//! `id<TAB>label<TAB>text`, or JSON lines with keys `id`, `label`, `text`.
//! Edges: whitespace-separated id pairs, one per line; `#` starts a comment.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::CorpusConfig;
use crate::exec::Exec;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub label: Option<String>,
    pub text: String,
    /// In-vocabulary token ids, in order.
    pub tokens: Vec<usize>,
}

impl Document {
    /// True when no token survived the vocabulary.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// In-vocabulary ids of a tokenized text.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().filter_map(|t| self.id(t)).collect()
    }
}

/// Documents, undirected edges (`i < j`, by document index) and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentGraph {
    pub docs: Vec<Document>,
    pub edges: BTreeSet<(usize, usize)>,
    pub vocab: Vocab,
    /// Sorted distinct label names; document labels index into this.
    pub labels: Vec<String>,
}

impl DocumentGraph {
    /// Builds a graph from raw records, inducing the vocabulary.
    pub fn from_records(
        records: Vec<(String, Option<String>, String)>,
        edges: BTreeSet<(usize, usize)>,
        cfg: &CorpusConfig,
    ) -> Self {
        let tokenized: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.2)).collect();
        let vocab = build_vocab(&tokenized, cfg.min_count, cfg.max_vocab, &cfg.stopwords);
        Self::with_vocab(records, &tokenized, edges, vocab)
    }

    fn with_vocab(
        records: Vec<(String, Option<String>, String)>,
        tokenized: &[Vec<String>],
        edges: BTreeSet<(usize, usize)>,
        vocab: Vocab,
    ) -> Self {
        let labels: Vec<String> = records
            .iter()
            .filter_map(|r| r.1.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let docs = records
            .into_iter()
            .zip(tokenized)
            .map(|((id, label, text), toks)| Document {
                tokens: vocab.encode(toks),
                id,
                label,
                text,
            })
            .collect();
        Self {
            docs,
            edges,
            vocab,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Label index of document `i`.
    pub fn label(&self, i: usize) -> Option<usize> {
        let l = self.docs[i].label.as_ref()?;
        self.labels.binary_search(l).ok()
    }

    pub fn has_labels(&self) -> bool {
        !self.labels.is_empty()
    }

    /// Sparse bag of words of document `i`, sorted by word id.
    pub fn counts(&self, i: usize) -> Vec<(usize, f64)> {
        bag_of_words(&self.docs[i].tokens)
    }

    /// Neighbor lists restricted to edges whose endpoints both satisfy `keep`.
    pub fn adjacency(&self, keep: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.docs.len()];
        for &(i, j) in &self.edges {
            if keep(i) && keep(j) {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    /// Documents with no in-vocabulary token.
    pub fn empty_documents(&self) -> Vec<usize> {
        (0..self.docs.len()).filter(|&i| self.docs[i].is_empty()).collect()
    }
}

/// Sparse word counts sorted by word id.
pub fn bag_of_words(tokens: &[usize]) -> Vec<(usize, f64)> {
    let mut m: BTreeMap<usize, f64> = BTreeMap::new();
    for &t in tokens {
        *m.entry(t).or_default() += 1.0;
    }
    m.into_iter().collect()
}

/// Lowercases, splits on whitespace and strips every non-alphanumeric
/// character; tokens that end up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Vocabulary ordered by descending frequency, ties lexicographic.
pub fn build_vocab(docs: &[Vec<String>], min_count: usize, max_vocab: Option<usize>, stopwords: &[String]) -> Vocab {
    let stop: HashSet<String> = stopwords.iter().map(|s| s.to_lowercase()).collect();
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for d in docs {
        for t in d {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|(w, c)| *c >= min_count && !stop.contains(*w))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if let Some(cap) = max_vocab {
        ranked.truncate(cap);
    }
    Vocab::from_words(ranked.into_iter().map(|(w, _)| w.to_string()).collect())
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Deserialize)]
struct JsonRecord {
    id: serde_json::Value,
    #[serde(default)]
    label: Option<serde_json::Value>,
    text: String,
}

fn json_scalar(v: serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

/// Parses a document file into `(id, label, text)` records.
pub fn parse_documents(path: &Path) -> Result<Vec<(String, Option<String>, String)>, CorpusError> {
    let text = read(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec = if line.trim_start().starts_with('{') {
            let r: JsonRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let label = r.label.filter(|l| !l.is_null()).map(json_scalar);
            (json_scalar(r.id), label, r.text)
        } else {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                [id, text] => (id.trim().to_string(), None, text.to_string()),
                [id, label, text] => {
                    let label = label.trim();
                    let label = (!label.is_empty()).then(|| label.to_string());
                    (id.trim().to_string(), label, text.to_string())
                }
                _ => {
                    return Err(err(format!(
                        "expected 2 or 3 tab-separated fields, got {}",
                        fields.len()
                    )))
                }
            }
        };
        if rec.0.is_empty() {
            return Err(err("empty document id".into()));
        }
        if !seen.insert(rec.0.clone()) {
            return Err(err(format!("duplicate document id {:?}", rec.0)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Parses an edge file against known document ids. Self-loops are dropped
/// with a warning; duplicates in either orientation collapse.
pub fn parse_edges(path: &Path, ids: &HashMap<String, usize>) -> Result<BTreeSet<(usize, usize)>, CorpusError> {
    let text = read(path)?;
    let mut edges = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [a, b] = parts.as_slice() else {
            return Err(err(format!("expected 2 ids, got {}", parts.len())));
        };
        let lookup = |s: &str| {
            ids.get(s)
                .copied()
                .ok_or_else(|| err(format!("edge references unknown document {s:?}")))
        };
        let (a, b) = (lookup(a)?, lookup(b)?);
        if a == b {
            log::warn!("{}:{}: dropping self-loop on {}", path.display(), i + 1, parts[0]);
            continue;
        }
        edges.insert((a.min(b), a.max(b)));
    }
    Ok(edges)
}

/// Loads documents and edges. Without an edge file, edges are induced by
/// tf-idf kNN with `cfg.knn_kappa`.
pub fn load_corpus(
    docs_path: &Path,
    edges_path: Option<&Path>,
    cfg: &CorpusConfig,
) -> Result<DocumentGraph, CorpusError> {
    load_corpus_with(docs_path, edges_path, cfg, None)
}

/// [`load_corpus`] with a fixed vocabulary (e.g. a checkpoint's) instead
/// of one induced from the documents.
pub fn load_corpus_with(
    docs_path: &Path,
    edges_path: Option<&Path>,
    cfg: &CorpusConfig,
    vocab: Option<Vocab>,
) -> Result<DocumentGraph, CorpusError> {
    let records = parse_documents(docs_path)?;
    if records.is_empty() {
        return Err(CorpusError::Invalid(format!(
            "{} contains no documents",
            docs_path.display()
        )));
    }
    let ids: HashMap<String, usize> = records.iter().enumerate().map(|(i, r)| (r.0.clone(), i)).collect();
    let tokenized: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.2)).collect();
    let vocab = vocab.unwrap_or_else(|| build_vocab(&tokenized, cfg.min_count, cfg.max_vocab, &cfg.stopwords));
    let edges = match edges_path {
        Some(p) => parse_edges(p, &ids)?,
        None => {
            let toks: Vec<Vec<usize>> = tokenized.iter().map(|t| vocab.encode(t)).collect();
            knn_edges(&toks, vocab.len(), cfg.knn_kappa, Exec::default())
        }
    };
    let graph = DocumentGraph::with_vocab(records, &tokenized, edges, vocab);
    let empty = graph.empty_documents().len();
    if empty > 0 {
        log::warn!("{empty} document(s) have no in-vocabulary tokens");
    }
    Ok(graph)
}

/// L2-normalised tf-idf rows with idf `ln((1+N)/(1+df)) + 1`.
pub fn tfidf(docs: &[Vec<usize>], vocab_size: usize) -> Vec<Vec<(usize, f64)>> {
    let n = docs.len() as f64;
    let mut df = vec![0usize; vocab_size];
    let bags: Vec<Vec<(usize, f64)>> = docs.iter().map(|d| bag_of_words(d)).collect();
    for b in &bags {
        for &(w, _) in b {
            df[w] += 1;
        }
    }
    bags.into_iter()
        .map(|b| {
            let mut row: Vec<(usize, f64)> = b
                .into_iter()
                .map(|(w, tf)| (w, tf * (((1.0 + n) / (1.0 + df[w] as f64)).ln() + 1.0)))
                .collect();
            let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (_, v) in &mut row {
                    *v /= norm;
                }
            }
            row
        })
        .collect()
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

/// Links every document to its `kappa` most cosine-similar others (ties to
/// the lower index) and symmetrises.
pub fn knn_edges(docs: &[Vec<usize>], vocab_size: usize, kappa: usize, exec: Exec) -> BTreeSet<(usize, usize)> {
    let rows = tfidf(docs, vocab_size);
    let nearest = exec.map_range(docs.len(), |i| {
        let mut sims: Vec<(f64, usize)> = (0..docs.len())
            .filter(|&j| j != i)
            .map(|j| (sparse_dot(&rows[i], &rows[j]), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        sims.truncate(kappa);
        sims.into_iter().map(|(_, j)| j).collect::<Vec<_>>()
    });
    let mut edges = BTreeSet::new();
    for (i, js) in nearest.into_iter().enumerate() {
        for j in js {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    edges
}

/// Document-level train / validation / test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Train,
    Validation,
    Test,
}

/// Where an edge may be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeClass {
    Train,
    Validation,
    Test,
    /// Endpoints in different parts; used nowhere.
    Cross,
}

impl Split {
    /// Shuffles `0..n` with `seed`; the first `round(f0 n)` ids train, the
    /// next `round(f1 n)` validate, the rest test. Each part is sorted.
    pub fn new(n: usize, fractions: [f64; 3], seed: u64) -> Self {
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        let mut train = ids[..n_train].to_vec();
        let mut validation = ids[n_train..n_train + n_val].to_vec();
        let mut test = ids[n_train + n_val..].to_vec();
        train.sort_unstable();
        validation.sort_unstable();
        test.sort_unstable();
        Self {
            train,
            validation,
            test,
        }
    }

    /// Part of every document, indexed by document.
    pub fn parts(&self, n: usize) -> Vec<Part> {
        let mut out = vec![Part::Test; n];
        for &i in &self.train {
            out[i] = Part::Train;
        }
        for &i in &self.validation {
            out[i] = Part::Validation;
        }
        out
    }

    pub fn classify(parts: &[Part], edge: (usize, usize)) -> EdgeClass {
        match (parts[edge.0], parts[edge.1]) {
            (Part::Train, Part::Train) => EdgeClass::Train,
            (Part::Validation, Part::Validation) => EdgeClass::Validation,
            (Part::Test, Part::Test) => EdgeClass::Test,
            _ => EdgeClass::Cross,
        }
    }

    pub fn edges_of(&self, graph: &DocumentGraph, class: EdgeClass) -> Vec<(usize, usize)> {
        let parts = self.parts(graph.len());
        graph
            .edges
            .iter()
            .copied()
            .filter(|&e| Self::classify(&parts, e) == class)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn tokenizer_is_pinned() {
        assert_eq!(
            tokenize("Hello, World!  don't (x)"),
            vec!["hello", "world", "dont", "x"]
        );
        assert!(tokenize(" -- ... ").is_empty());
    }

    #[test]
    fn vocab_ranking() {
        let docs = vec![
            vec!["b".to_string(), "a".into(), "c".into()],
            vec!["a".to_string(), "b".into(), "a".into()],
        ];
        let v = build_vocab(&docs, 1, None, &[]);
        assert_eq!(v.words(), ["a", "b", "c"]);
        assert_eq!(build_vocab(&docs, 1, Some(2), &[]).words(), ["a", "b"]);
        assert_eq!(build_vocab(&docs, 2, None, &[]).words(), ["a", "b"]);
        assert_eq!(build_vocab(&docs, 1, None, &["A".into()]).words(), ["b", "c"]);
        assert_eq!(v, build_vocab(&docs, 1, None, &[]));
    }

    #[test]
    fn loads_tsv_jsonl_and_edges() {
        let dir = tempfile::tempdir().unwrap();
        let docs = write(
            &dir,
            "docs.tsv",
            "d1\tA\tGraph models, graph!\nd2\tplain text here\n{\"id\": 3, \"label\": \"B\", \"text\": \"more graph text\"}\nd4\t\t...\n",
        );
        let edges = write(&dir, "edges.txt", "d1 d2\nd2 d1\n# note\nd2 3\nd4 d4\n");
        let g = load_corpus(&docs, Some(&edges), &CorpusConfig::default()).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.edges.iter().copied().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
        assert_eq!(g.labels, vec!["A", "B"]);
        assert_eq!(g.label(2), Some(1));
        assert_eq!(g.label(1), None);
        assert_eq!(g.docs[2].id, "3");
        assert_eq!(g.empty_documents(), vec![3]);
        assert_eq!(g.vocab.word(0), "graph");
        assert_eq!(g.counts(0), vec![(0, 2.0), (g.vocab.id("models").unwrap(), 1.0)]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let docs = write(&dir, "docs.tsv", "a\tx\nb\tc\td\te\n");
        match load_corpus(&docs, None, &CorpusConfig::default()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let docs = write(&dir, "ok.tsv", "a\tx\nb\ty\n");
        let edges = write(&dir, "e.txt", "a b\na zz\n");
        match load_corpus(&docs, Some(&edges), &CorpusConfig::default()) {
            Err(CorpusError::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("zz"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn knn_identical_and_ties() {
        // Documents 0 and 2 are identical; 1 is unrelated.
        let docs = vec![vec![0, 1], vec![2], vec![0, 1], vec![3]];
        let e = knn_edges(&docs, 4, 1, Exec::Sequential);
        assert!(e.contains(&(0, 2)));
        // Orthogonal documents tie at 0 and link to the lowest other index.
        let ortho = vec![vec![0], vec![1], vec![2]];
        let e = knn_edges(&ortho, 3, 1, Exec::Sequential);
        assert_eq!(e.into_iter().collect::<Vec<_>>(), vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn knn_degree_at_least_kappa() {
        let docs: Vec<Vec<usize>> = (0..30).map(|i| vec![i % 7, (i * 3) % 11, i % 5]).collect();
        let e = knn_edges(&docs, 11, 4, Exec::Parallel);
        let mut deg = [0; 30];
        for (a, b) in e {
            deg[a] += 1;
            deg[b] += 1;
        }
        assert!(deg.iter().all(|&d| d >= 4));
    }

    #[test]
    fn split_protocol() {
        let s = Split::new(1000, [0.72, 0.08, 0.20], 5);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (720, 80, 200));
        assert_eq!(s, Split::new(1000, [0.72, 0.08, 0.20], 5));
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }
}
