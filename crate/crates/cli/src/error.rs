use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Inconsistent dataset contents.
    #[error("data: {0}")]
    Data(String),

    /// Training stopped on a non-finite value; partial outputs were kept.
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("gradient check failed: max relative error {max_rel_err:e} >= {tol:e} ({variant})")]
    GradCheck { variant: String, max_rel_err: f64, tol: f64 },

    #[error(transparent)]
    Core(#[from] gca_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn config(e: gca_core::Error) -> Self {
        CliError::Config(e.to_string())
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        use gca_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Divergence { .. } => 4,
            CliError::Data(_) => 6,
            CliError::GradCheck { .. } => 5,
            CliError::Core(e) => match e {
                E::Io(_) => 3,
                E::Divergence { .. } | E::NonFinite { .. } => 4,
                E::Parse { .. } | E::Checkpoint { .. } | E::CheckpointFormat(_) | E::Json(_) | E::Shape { .. } => 6,
                E::Contract(_) => 2,
                E::NonDeterministic { .. } => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
