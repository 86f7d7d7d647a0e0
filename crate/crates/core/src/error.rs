use std::path::PathBuf;

/// Errors raised across the crate. Every variant carries enough context to be
/// printed as a single diagnostic line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("degenerate segment [{start}, {end}): start must be < end")]
    DegenerateSegment { start: f64, end: f64 },

    #[error("overlapping actions in video {video_id}: #{first} [{first_start}, {first_end}) and #{second} [{second_start}, {second_end})")]
    OverlappingActions {
        video_id: String,
        first: usize,
        first_start: f64,
        first_end: f64,
        second: usize,
        second_start: f64,
        second_end: f64,
    },

    #[error("unknown labels: {0:?}")]
    UnknownLabels(Vec<String>),

    #[error("non-finite value in tensor {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("feature file: {0}")]
    FeatureFile(String),

    #[error("config: {0}")]
    Config(String),

    #[error("synthetic data: {0}")]
    Synthetic(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category used by the CLI's diagnostic line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument { .. } => "invalid-argument",
            Error::DegenerateSegment { .. } => "degenerate-segment",
            Error::OverlappingActions { .. } => "overlapping-actions",
            Error::UnknownLabels(_) => "unknown-labels",
            Error::NonFinite(_) => "non-finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::FeatureFile(_) => "feature-file",
            Error::Config(_) => "config",
            Error::Synthetic(_) => "synthetic",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
