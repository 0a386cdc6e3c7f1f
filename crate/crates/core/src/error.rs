use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for {len} layers")]
    Index { index: usize, len: usize },

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("invalid architecture description: {0}")]
    Architecture(String),

    #[error("batch partition error: {0}")]
    Partition(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("training diverged at iteration {iteration}: non-finite loss {loss}")]
    Divergence { iteration: u64, loss: f64 },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("cannot build distribution: {0}")]
    Build(String),

    #[error(
        "no configuration within {tolerance} FLOPs of target {target} after {trials} trials \
         (closest seen: {closest_flops} FLOPs)"
    )]
    SamplingExhausted {
        target: u64,
        tolerance: f64,
        trials: u64,
        closest_flops: u64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad user input (missing files, malformed
    /// configs, invalid arguments) rather than failures during a run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Architecture(_)
                | Error::Parse { .. }
                | Error::Io { .. }
                | Error::Index { .. }
                | Error::Build(_)
        )
    }
}
