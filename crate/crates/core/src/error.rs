use std::path::PathBuf;

/// Errors produced anywhere in the compositing toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("network configuration: {0}")]
    Config(String),

    #[error("model state: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("mask covers {fraction:.3} of the image; refusing to inpaint")]
    Unerasable { fraction: f64 },

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("unknown segment id {0}")]
    UnknownSegment(u64),

    #[error("degenerate scale factor {0}")]
    DegenerateScale(f64),

    #[error("correlation undefined: histogram has zero variance")]
    UndefinedCorrelation,

    #[error("evaluation set is empty")]
    EmptyEvaluation,

    #[error("feature extraction failed: {0}")]
    Extraction(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
