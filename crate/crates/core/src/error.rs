use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Operand dimensions that do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error in {path} at byte offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("invalid client: {0}")]
    InvalidClient(String),

    /// The prior assigns zero mass to the label of a batch sample.
    #[error("degenerate loss: sample {row} has label {label} with zero prior probability")]
    DegenerateLoss { row: usize, label: usize },

    #[error("ill-conditioned recalibration: class {class} has zero source prior but posterior mass {mass}")]
    IllConditioned { class: usize, mass: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from numerics rather than setup.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::DegenerateLoss { .. } | Error::IllConditioned { .. }
        )
    }

    /// Process exit status used by the CLI: 1 for configuration/data problems,
    /// 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            2
        } else {
            1
        }
    }
}
