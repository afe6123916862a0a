use std::path::PathBuf;

use tgraph::autodiff::AutodiffError;
use tgraph::dataset::DatasetError;
use tgraph::model::ModelError;
use tgraph::preprocess::PreprocessError;
use tgraph::ranking::RankingError;
use tgraph::training::TrainingError;
use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io { .. } => EXIT_IO,
        }
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            msg: err.to_string(),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { path, source } => CliError::io(path, source),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { path, source } => CliError::io(path, source),
            ModelError::Autodiff(inner) => inner.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<RankingError> for CliError {
    fn from(e: RankingError) -> Self {
        match e {
            RankingError::NonFinite => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::Dataset(inner) => inner.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainingError::Io { path, source } => CliError::io(path, source),
            TrainingError::Model(inner) => inner.into(),
            TrainingError::Preprocess(inner) => inner.into(),
            TrainingError::Dataset(inner) => inner.into(),
            TrainingError::Ranking(inner) => inner.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}
