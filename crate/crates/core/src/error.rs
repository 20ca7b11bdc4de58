//! Error type shared across the library.
//!
//! Variants map onto the CLI exit-code categories: invalid input (2),
//! data validation (3), numerical failure (4), I/O (5).

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller violated an operation precondition (bad flag value, bad
    /// argument combination).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Input data failed validation (malformed rows, broken invariants,
    /// referential integrity).
    #[error("data validation: {0}")]
    Data(String),

    /// A numerical procedure failed (non-convergence, degenerate model,
    /// bracket failure).
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status for the CLI: 2 usage, 3 data, 4 numerical, 5 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidInput(_) => 2,
            Error::Data(_) | Error::Csv(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) => 5,
        }
    }
}
