use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// A dimension premise of an operation does not hold (e.g. `T > X + 2`).
    #[error("dimension precondition violated: {0}")]
    Dimension(String),

    #[error("family mismatch: {0}")]
    FamilyMismatch(String),

    /// The numbers do not behave as the model family says they must.
    #[error("numerical diagnostic: {0}")]
    Numerical(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
