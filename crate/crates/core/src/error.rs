use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed series: {0}")]
    MalformedSeries(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("insufficient observations: {0}")]
    InsufficientObservations(String),

    #[error("t = {t} lies outside the path domain [{start}, {end}]")]
    Domain { t: f64, start: f64, end: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// A solver produced a non-finite state at time `s`.
    #[error("non-finite state encountered at s = {s}")]
    NumericalBlowup { s: f64 },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// A failure while processing one sample of a set.
    #[error("sample {id}: {source}")]
    Sample {
        id: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for the errors that the CLI reports with the "numerical" exit status.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NumericalBlowup { .. } | Error::NumericalFailure(_) => true,
            Error::Sample { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn in_sample(self, id: usize) -> Self {
        Error::Sample {
            id,
            source: Box::new(self),
        }
    }
}
