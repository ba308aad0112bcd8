//! Versioned, byte-stable checkpoint container.
//!
//! JSON with parameters in insertion order; `f64`s are written in their
//! shortest round-tripping form so save → load → save is byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::corpus::Vocab;
use crate::geometry::Curvature;
use crate::model::{Model, ModelShape, ParamLayout};
use crate::params::ParamStore;
use crate::tree::TopicTree;

pub const FORMAT: &str = "hypertopic-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub config_hash: String,
    pub config: RunConfig,
    pub vocab: Vec<String>,
    pub labels: Vec<String>,
    pub tree: TopicTree,
    pub params: Vec<Tensor>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        tree: &TopicTree,
        cfg: &RunConfig,
        vocab: &Vocab,
        labels: &[String],
        epoch: usize,
    ) -> Self {
        let params = model
            .store
            .ids()
            .map(|id| {
                let m = model.store.value(id);
                Tensor {
                    name: model.store.name(id).to_string(),
                    shape: [m.nrows(), m.ncols()],
                    data: m.iter().copied().collect(),
                }
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            epoch,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            vocab: vocab.words().to_vec(),
            labels: labels.to_vec(),
            tree: tree.clone(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let ck: Self = serde_json::from_slice(bytes).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if ck.format != FORMAT {
            return Err(CheckpointError::Format(format!("unknown format tag {:?}", ck.format)));
        }
        if ck.version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {}", ck.version)));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(CheckpointError::Format("config hash mismatch".into()));
        }
        ck.tree
            .check_invariants()
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_words(self.vocab.clone())
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape::from_config(&self.config, self.vocab.len(), self.labels.len())
    }

    /// Rebuilds the model; every expected tensor must be present with the
    /// expected shape.
    pub fn model(&self) -> Result<Model, CheckpointError> {
        let mut store = ParamStore::new();
        for t in &self.params {
            if t.data.len() != t.shape[0] * t.shape[1] {
                return Err(CheckpointError::Format(format!("tensor {} has wrong length", t.name)));
            }
            let m = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| CheckpointError::Format(e.to_string()))?;
            store.insert(&t.name, m);
        }
        let shape = self.shape();
        let layout = ParamLayout::resolve(&store, &shape).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let k = Curvature::new(self.config.model.curvature).map_err(|e| CheckpointError::Format(e.to_string()))?;
        Ok(Model::from_parts(shape, store, layout, k, self.config.ablation))
    }
}
