use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("softmax row {row} has no attendable position")]
    FullyMasked { row: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("file format: {0}")]
    Format(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input (exit code 2 in the CLI).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. } | Error::Invalid(_) | Error::Config(_) | Error::Format(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
