//! Run bookkeeping, on-disk workspace layout, and the command-line front end.

pub mod audit;
pub mod cli;
pub mod config;
pub mod manifest;
mod workspace;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use workspace::{replay, AnalyzeSummary, CorpusStore, ReplayOutcome, Workspace};

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("{path} changed since the run (expected sha256 {expected}, found {actual})")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("run used the live backend `{0}`; only scripted runs can be replayed")]
    LiveBackendNotReplayable(String),
    #[error("replay differs from the original run in: {}", .0.join(", "))]
    ReplayMismatch(Vec<String>),
    #[error("no ingested corpus at {0}; run `thematic ingest <transcripts>` first")]
    MissingCorpus(PathBuf),
    #[error("knowledge-base index not found at {0}; run `thematic index` before analyzing with the rag strategy")]
    MissingIndex(PathBuf),
    #[error("index was built with `{index}` but the config selects `{config}`; rebuild it with `thematic index`")]
    IndexModelMismatch { index: String, config: String },
    #[error("no run found; run `thematic analyze` first")]
    NoRuns,
    #[error("run `{0}` has no evaluation; run `thematic evaluate` first")]
    NotEvaluated(String),
    #[error("embedding model `{0}` is not configured")]
    UnknownModel(String),
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Prompt(#[from] crate::prompting::PromptError),
    #[error(transparent)]
    Llm(#[from] crate::llm::LlmError),
    #[error(transparent)]
    Lda(#[from] crate::lda::LdaError),
    #[error(transparent)]
    Audit(#[from] audit::AuditError),
}

impl WorkbenchError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}
