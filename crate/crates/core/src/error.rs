use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("layer `{layer}` has kind {found}, expected {expected}")]
    Kind {
        layer: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("graft failed: {0}")]
    Graft(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("worker {worker} failed at epoch {epoch}")]
    Worker {
        worker: usize,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::ShapeMismatch { .. } => "shape",
            Error::Domain(_) => "domain",
            Error::NonFinite(_) => "non-finite",
            Error::Config { .. } => "config",
            Error::Kind { .. } => "kind",
            Error::Validation(_) => "validation",
            Error::Graft(_) => "graft",
            Error::Divergence { .. } => "divergence",
            Error::Worker { source, .. } => source.category(),
        }
    }
}
