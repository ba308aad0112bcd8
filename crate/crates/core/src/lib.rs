//! Hierarchical graph topic modeling: a hyperbolic topic tree grown by a
//! doubly recurrent network, and a Transformer whose layers read the tree and
//! each document's graph neighborhood.
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod doc_topic;
pub mod drnn;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod graph_attn;
pub mod model;
pub mod objective;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tape;
pub mod train;
pub mod transformer;
pub mod tree;

use std::path::PathBuf;

/// Every failure a command can end in, mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    /// 2 config, 3 data, 4 numerical abort, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Corpus(_) | Error::Checkpoint(_) => 3,
            Error::Train(train::TrainError::NonFinite { .. }) => 4,
            Error::Train(train::TrainError::Setup(_)) => 3,
            Error::Io { .. } => 1,
        }
    }
}
