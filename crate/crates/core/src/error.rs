use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("training diverged at step {step}: {reason}")]
    Training {
        step: usize,
        reason: String,
        history: Box<crate::nnet::TrainHistory>,
    },

    #[error("no valid placement for flaw after {0} attempts")]
    Placement(usize),

    #[error("flaw bank leakage: {0}")]
    Leakage(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("not demonstrable: {0}")]
    NotDemonstrable(String),

    #[error("empty metric: {0}")]
    EmptyMetric(String),

    #[error("inconsistent input: {0}")]
    Inconsistency(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Shape(_) => "shape",
            Error::State(_) => "state",
            Error::Optimizer(_) => "optimizer",
            Error::Training { .. } => "training",
            Error::Placement(_) => "placement",
            Error::Leakage(_) => "leakage",
            Error::DegenerateData(_) => "degenerate_data",
            Error::Fit(_) => "fit",
            Error::NotDemonstrable(_) => "not_demonstrable",
            Error::EmptyMetric(_) => "empty_metric",
            Error::Inconsistency(_) => "inconsistency",
        }
    }
}
