use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stage an error was raised in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Generate,
    Split,
    Fit,
    Level1,
    Ensemble,
    Refit,
    Score,
    Simulate,
    Test,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Generate => "generate",
            Stage::Split => "split",
            Stage::Fit => "fit",
            Stage::Level1 => "level1",
            Stage::Ensemble => "ensemble",
            Stage::Refit => "refit",
            Stage::Score => "score",
            Stage::Simulate => "simulate",
            Stage::Test => "test",
            Stage::Report => "report",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum AdlpError {
    #[error("[{stage}] {message}")]
    Config { stage: Stage, message: String },

    #[error("[{stage}] dataset {dataset}: {source}")]
    Numerical {
        stage: Stage,
        dataset: String,
        #[source]
        source: adlp_core::Error,
    },

    #[error("[{stage}] {}: {source}", path.display())]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("[{stage}] {}: {message}", path.display())]
    Format { stage: Stage, path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, AdlpError>;

impl AdlpError {
    pub fn config(stage: Stage, message: impl Into<String>) -> Self {
        AdlpError::Config { stage, message: message.into() }
    }

    pub fn io(stage: Stage, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AdlpError::Io { stage, path: path.into(), source }
    }

    pub fn format(stage: Stage, path: impl Into<PathBuf>, message: impl ToString) -> Self {
        AdlpError::Format { stage, path: path.into(), message: message.to_string() }
    }

    pub fn stage(&self) -> Stage {
        match self {
            AdlpError::Config { stage, .. }
            | AdlpError::Numerical { stage, .. }
            | AdlpError::Io { stage, .. }
            | AdlpError::Format { stage, .. } => *stage,
        }
    }

    /// 1 config error, 2 numerical failure, 3 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            AdlpError::Config { .. } => 1,
            AdlpError::Numerical { stage: Stage::Ingest, .. } => 3,
            AdlpError::Numerical { .. } => 2,
            AdlpError::Io { .. } | AdlpError::Format { .. } => 3,
        }
    }
}

/// Tags core errors with a stage and dataset.
pub(crate) trait CoreContext<T> {
    fn at(self, stage: Stage, dataset: &str) -> Result<T>;
}

impl<T> CoreContext<T> for adlp_core::Result<T> {
    fn at(self, stage: Stage, dataset: &str) -> Result<T> {
        self.map_err(|source| AdlpError::Numerical { stage, dataset: dataset.to_string(), source })
    }
}
