use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("separating unit vector not found after {attempts} attempts")]
    SearchFailure { attempts: usize },

    #[error("gate collision: {0}")]
    GateCollision(String),

    #[error("bump overlap: K = {k} but the closest pair of context IDs needs K > {required}")]
    BumpOverlap { k: f64, required: f64 },

    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),

    #[error("dataset not realizable on the chosen grid: {0}")]
    Realizability(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("Taylor normalizer is not positive at column {column}; degree {degree} is too small")]
    DegreeTooSmall { column: usize, degree: usize },

    #[error("certification failed after escalation: max error {max_err:e} > {tol:e} at degree {degree}")]
    Certification { max_err: f64, tol: f64, degree: usize },

    #[error("search space too large: {0}")]
    SearchSpace(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    /// True for errors caused by bad inputs rather than by a failed check.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::Verification(_) | Error::Certification { .. } | Error::SearchFailure { .. }
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
