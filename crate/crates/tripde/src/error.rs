use thiserror::Error;

/// Errors shared by every solver component.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPositiveSemidefinite { min_eig: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("degenerate regression: {0}")]
    DegenerateRegression(String),

    #[error("degenerate generator bounds: {0}")]
    DegenerateBounds(String),
}

pub type Result<T> = std::result::Result<T, Error>;
