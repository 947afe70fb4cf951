//! Crate-wide error type.

/// Error type shared by all modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A group did not satisfy the structural requirements (length, finiteness).
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    /// An enumeration would exceed the configured cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    /// Internal bookkeeping disagreed (e.g. a score missing for a selected prompt).
    #[error("consistency error: {0}")]
    Consistency(String),
    /// A pruning plan retained zero prompts; the batch is skipped.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    /// Configuration file problem, with the offending line when known.
    #[error("config{}: {message}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Config {
        line: Option<usize>,
        message: String,
    },
    /// Filesystem failure while reading config or writing outputs.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Config {
            line,
            message: msg.into(),
        }
    }
}
