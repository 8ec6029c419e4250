use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("identical timestamps ({0} s) cannot yield a rate")]
    ZeroTimeStep(f64),

    #[error("tomography basis {basis} has zero total counts")]
    EmptyTomographyBasis { basis: &'static str },

    #[error("insufficient statistics: single-photon yield bound is {y1_lower:e}")]
    InsufficientStatistics { y1_lower: f64 },

    #[error("seed length {got} does not match required {expected}")]
    SeedLength { expected: usize, got: usize },

    #[error("unknown pass id `{0}`")]
    UnknownPass(String),

    #[error("nothing to summarize")]
    EmptySummary,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
