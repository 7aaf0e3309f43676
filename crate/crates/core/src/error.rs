use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("truncation interval has no representable mass (standardized bound {z:.3}){}", observation_suffix(*.observation))]
    DegenerateTail { z: f64, observation: Option<u64> },

    #[error("matrix decomposition failed: {0}")]
    Decomposition(String),

    #[error("numerical failure{}: {message}", iteration_suffix(*.iteration))]
    Numerical {
        iteration: Option<usize>,
        message: String,
        state: Option<String>,
    },

    #[error("data integrity: {message} (rows: {rows:?})")]
    DataIntegrity { message: String, rows: Vec<u64> },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("series too short: need at least {required} values, got {actual}")]
    SeriesTooShort { required: usize, actual: usize },

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn observation_suffix(obs: Option<u64>) -> String {
    obs.map(|id| format!(" for observation {id}")).unwrap_or_default()
}

fn iteration_suffix(iter: Option<usize>) -> String {
    iter.map(|i| format!(" at iteration {i}")).unwrap_or_default()
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::DegenerateTail { .. } | Error::Decomposition(_) | Error::Numerical { .. } => {
                ErrorKind::Numerical
            }
            Error::Io(_) => ErrorKind::Io,
            Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => ErrorKind::Io,
            Error::Json(e) if e.is_io() => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            iteration: None,
            message: message.into(),
            state: None,
        }
    }

    /// Attaches an observation id to a tail failure raised deep inside a sampler.
    pub(crate) fn at_observation(self, id: u64) -> Self {
        match self {
            Error::DegenerateTail { z, .. } => Error::DegenerateTail {
                z,
                observation: Some(id),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
