use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum PetsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate spectrum: total energy is zero")]
    DegenerateSpectrum,

    #[error("degenerate denominator: {0}")]
    DegenerateDenominator(String),

    #[error("state error: {0}")]
    StateError(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl PetsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PetsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &str, a: &[usize], b: &[usize]) -> Self {
        PetsError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
    }
}

pub type Result<T> = std::result::Result<T, PetsError>;
