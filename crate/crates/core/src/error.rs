use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range [0, {bound})")]
    Index { index: usize, bound: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("policy returned invalid action {value} at step {step}")]
    Policy { step: usize, value: f64 },

    #[error("inference produced a non-finite action at step {0}")]
    Inference(usize),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible inputs: {0}")]
    Compatibility(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Divergence { iteration: u64, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
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

    /// Short category name, used for CLI diagnostics and FFI status codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Index { .. } => "index",
            Error::NonFinite(_) => "numeric",
            Error::Policy { .. } => "policy",
            Error::Inference(_) => "inference",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Compatibility(_) => "compatibility",
            Error::Divergence { .. } => "divergence",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for the CLI. Zero is reserved for success.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Parse { .. } | Error::Format(_) => 4,
            Error::Compatibility(_) => 5,
            Error::Divergence { .. } => 6,
            Error::NonFinite(_) | Error::Inference(_) | Error::Policy { .. } => 7,
            Error::Dimension { .. } | Error::Contract(_) | Error::Domain(_) | Error::Index { .. } => 8,
        }
    }
}
