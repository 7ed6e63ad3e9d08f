use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants map onto the CLI exit codes: everything is
/// a usage/data error (exit 1) except `Numeric`, which signals a mid-run
/// numerical abort (exit 2).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was handed tensors whose shapes do not fit together.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// A caller-supplied value is outside the contract of the function.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Non-finite value produced mid-computation; `step` locates the failing
    /// sampler or trainer step so the run can be diagnosed and resumed.
    #[error("numerical abort at step {step}: {msg}")]
    Numeric { step: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its bytes do not parse as the expected format.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// A required artifact (checkpoint, dataset) is absent; the message says
    /// which command produces it.
    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
