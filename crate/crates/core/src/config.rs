//! Run configuration: defaults, JSON / `key=value` loading and validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub docs: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            docs: None,
            edges: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Spatial dimension `n`; points live in `n + 1` ambient coordinates.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub levels: usize,
    pub branching: usize,
    pub curvature: f64,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 63,
            layers: 4,
            heads: 4,
            levels: 3,
            branching: 3,
            curvature: 1.0,
            max_len: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_topic: f64,
    pub lambda_sup: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub max_neighbors: usize,
    pub supervised: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_topic: 1.0,
            lambda_sup: 1.0,
            tau: 10.0,
            batch_size: 16,
            max_neighbors: 5,
            supervised: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub s_add: f64,
    pub s_prune: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            s_add: 0.05,
            s_prune: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub kappa: usize,
    pub top_k: usize,
    pub npmi_window: usize,
    pub npmi_smoothing: f64,
    pub negative_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kappa: 5,
            top_k: 10,
            npmi_window: 10,
            npmi_smoothing: 1.0,
            negative_seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_count: usize,
    pub max_vocab: Option<usize>,
    pub stopwords: Vec<String>,
    /// Induce edges by tf-idf kNN when no edge file is given.
    pub knn_kappa: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_vocab: None,
            stopwords: Vec::new(),
            knn_kappa: 5,
            split: [0.72, 0.08, 0.20],
            split_seed: 0,
        }
    }
}

/// Ablation switches; all off for the full model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub flat_tree: bool,
    pub fixed_tree: bool,
    pub euclidean: bool,
    pub no_tree_injection: bool,
    pub no_graph_injection: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub tree: TreeConfig,
    pub eval: EvalConfig,
    pub corpus: CorpusConfig,
    pub ablation: Ablation,
}

impl RunConfig {
    /// Loads a JSON object (if the file starts with `{`) or `key=value`
    /// lines with dotted keys. Missing keys take defaults.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            parse_key_values(text)?
        };
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides with dotted keys on top of `self`.
    pub fn with_overrides(&self, pairs: &[String]) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(self)?;
        let overrides = parse_key_values(&pairs.join("\n"))?;
        merge(&mut value, overrides);
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if m.dim < 1 {
            return bad("model.dim must be >= 1".into());
        }
        if m.layers < 2 {
            return bad(format!("model.layers must be >= 2 (got {})", m.layers));
        }
        if m.heads < 1 || m.heads > m.dim + 1 {
            return bad(format!("model.heads must be in 1..={}", m.dim + 1));
        }
        if m.levels < 2 || m.branching < 1 {
            return bad("model.levels must be >= 2 and model.branching >= 1".into());
        }
        if !(m.curvature > 0.0 && m.curvature.is_finite()) {
            return bad(format!("model.curvature must be positive (got {})", m.curvature));
        }
        if m.max_len < 1 {
            return bad("model.max_len must be >= 1".into());
        }
        let l = &self.loss;
        if !(l.lambda_topic >= 0.0 && l.lambda_sup >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        if !(l.tau > 0.0) {
            return bad(format!("loss.tau must be positive (got {})", l.tau));
        }
        if l.batch_size < 2 {
            return bad("loss.batch_size must be >= 2".into());
        }
        if !(self.optim.lr > 0.0) || self.optim.epochs == 0 {
            return bad("optim.lr must be positive and optim.epochs >= 1".into());
        }
        for (name, s) in [("tree.s_add", self.tree.s_add), ("tree.s_prune", self.tree.s_prune)] {
            if !(s > 0.0 && s < 1.0) {
                return bad(format!("{name} must lie in (0, 1) (got {s})"));
            }
        }
        if self.eval.kappa < 1 || self.eval.top_k < 2 || self.eval.npmi_window < 2 {
            return bad("eval.kappa >= 1, eval.top_k >= 2, eval.npmi_window >= 2 required".into());
        }
        if self.eval.npmi_smoothing < 0.0 {
            return bad("eval.npmi_smoothing must be >= 0".into());
        }
        let s = self.corpus.split;
        if s.iter().any(|f| *f < 0.0) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("corpus.split fractions must be >= 0 and sum to 1 (got {s:?})"));
        }
        if self.corpus.knn_kappa < 1 {
            return bad("corpus.knn_kappa must be >= 1".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn parse_key_values(text: &str) -> Result<Value, ConfigError> {
    let mut root = Value::Object(Default::default());
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, val) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        let val = val.trim();
        let parsed = serde_json::from_str(val).unwrap_or_else(|_| Value::String(val.to_string()));
        let mut nested = parsed;
        for part in key.split('.').rev() {
            let mut map = serde_json::Map::new();
            map.insert(part.to_string(), nested);
            nested = Value::Object(map);
        }
        merge(&mut root, nested);
    }
    Ok(root)
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(existing) if existing.is_object() && v.is_object() => merge(existing, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (dst, src) => *dst = src,
    }
}

/// Flat `dotted.key -> value` view, used for the config echo table.
pub fn flatten(cfg: &RunConfig) -> BTreeMap<String, String> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
        match v {
            Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", &serde_json::to_value(cfg).expect("config serializes"), &mut out);
    out
}
