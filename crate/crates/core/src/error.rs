use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("layer `{layer}` has no frozen quantization parameters; calibrate or run QAT first")]
    MissingQuantParams { layer: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category, used for CLI exit reporting and FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Autodiff(_) => "autodiff",
            Error::Numerical(_) => "numerical",
            Error::MissingQuantParams { .. } => "missing_quant_params",
            Error::Config(_) => "config",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
