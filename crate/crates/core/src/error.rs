use thiserror::Error;

/// Errors raised by the inference, learning and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("numerical failure at node {node}: {msg}")]
    Numerical { node: usize, msg: String },

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn data(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Data { line, msg: msg.into() }
    }

    pub(crate) fn numerical(node: usize, msg: impl Into<String>) -> Self {
        Error::Numerical { node, msg: msg.into() }
    }

    /// True when the error originates from a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::NoConvergence { .. })
    }

    /// True when the error comes from reading or parsing data.
    pub fn is_data(&self) -> bool {
        matches!(self, Error::Data { .. } | Error::Io(_) | Error::Serde(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
