use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "pretrained weights for backbone `{backbone}` are unavailable ({reason}); {remediation}"
    )]
    PretrainedUnavailable {
        backbone: String,
        reason: String,
        remediation: String,
    },

    #[error("cannot parse file name `{name}`: bad {component} ({detail})")]
    Parse {
        name: String,
        component: &'static str,
        detail: String,
    },

    #[error("empty dataset: no parseable images under {}", .0.display())]
    EmptyDataset(PathBuf),

    #[error("duplicate path in manifest: {}", .0.display())]
    DuplicatePath(PathBuf),

    #[error("split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("checkpoint does not match its configuration: {0}")]
    ConfigMismatch(String),

    #[error("corrupt checkpoint {}: {detail}", .path.display())]
    CorruptCheckpoint { path: PathBuf, detail: String },

    #[error("incomplete report: {0}")]
    IncompleteReport(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("another latency benchmark is already running in this process")]
    BenchmarkBusy,

    #[error("sweep candidate m = {m} failed: {source}")]
    Sweep {
        m: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
