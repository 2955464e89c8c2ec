use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite gradient in tensor {tensor} at entry {entry}")]
    NonFiniteGradient { tensor: usize, entry: usize },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sampling error: need {needed} eligible classes, found {available}")]
    Sampling { needed: usize, available: usize },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True when the failure stems from invalid configuration or arguments
    /// rather than from the computation itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Usage(_))
    }
}
