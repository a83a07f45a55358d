//! Workspace-wide error type. Every fallible public function returns
//! [`Result`]; the CLI maps variants onto process exit codes.

/// Failure categories surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration values (bad shapes, fractions, hyperparameters).
    #[error("config: {0}")]
    Config(String),

    /// A structural precondition was violated (shape mismatch, rank, range).
    #[error("constraint: {0}")]
    Constraint(String),

    /// Dataset-level problems: empty sets, missing masks, bad labels.
    #[error("data: {0}")]
    Data(String),

    /// An operation was called in the wrong order (e.g. backward twice).
    #[error("state: {0}")]
    State(String),

    /// Malformed files: checkpoints, manifests, images.
    #[error("format: {0}")]
    Format(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config/constraint, 3 data/format/io,
    /// 4 state/numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Constraint(_) => 2,
            Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
            Error::State(_) | Error::Numeric(_) => 4,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}
