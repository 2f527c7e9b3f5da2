use std::path::Path;

use crate::embedding_store::StoreError;
use crate::flow_matching::FlowError;
use crate::pipeline::{PipelineError, Stage, StageError, TokenError};
use crate::retrieval::RetrievalError;
use crate::synthbench::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum ExitCode {
    Io = 1,
    Usage = 2,
    EmptyPool = 3,
    Synthesis = 4,
    Format = 5,
    Clustering = 6,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    EmptyPool(String),
    #[error("{0}")]
    Synthesis(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Clustering(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn code(&self) -> ExitCode {
        match self {
            CliError::Io(_) => ExitCode::Io,
            CliError::Usage(_) => ExitCode::Usage,
            CliError::EmptyPool(_) => ExitCode::EmptyPool,
            CliError::Synthesis(_) => ExitCode::Synthesis,
            CliError::Format(_) => ExitCode::Format,
            CliError::Clustering(_) => ExitCode::Clustering,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        let msg = e.to_string();
        match e {
            RetrievalError::NoCandidates | RetrievalError::EmptySubset(_) => CliError::EmptyPool(msg),
            RetrievalError::Io(_) => CliError::Io(msg),
            RetrievalError::MalformedIndex(_) | RetrievalError::DimensionMismatch { .. } => CliError::Format(msg),
            RetrievalError::InvalidK { .. }
            | RetrievalError::ZeroNorm(_)
            | RetrievalError::StaleIndex { .. }
            | RetrievalError::MissingIndex(_) => CliError::Clustering(msg),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Retrieval(r) => r.into(),
            BenchError::Io(_) => CliError::Io(e.to_string()),
            BenchError::Encode(_) => CliError::Format(e.to_string()),
            BenchError::Config(_)
            | BenchError::UnavailableSize { .. }
            | BenchError::EmptyQueries
            | BenchError::EmptyResults => CliError::Usage(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Io(_) => CliError::Io(e.to_string()),
            FlowError::Format(_) => CliError::Format(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<TokenError> for CliError {
    fn from(e: TokenError) -> Self {
        match e {
            TokenError::Map { .. } => CliError::Format(e.to_string()),
            TokenError::File { .. } | TokenError::Missing(_) => CliError::Synthesis(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match (&e.stage, &e.source) {
            (
                Stage::Retrieval,
                StageError::Retrieval(RetrievalError::NoCandidates | RetrievalError::EmptySubset(_)),
            ) => CliError::EmptyPool(msg),
            (Stage::Reference, StageError::Io(_)) => CliError::Io(msg),
            (Stage::Reference, _) => CliError::Format(msg),
            _ => CliError::Synthesis(msg),
        }
    }
}
