use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not Hermitian: relative deviation {deviation:.3e} exceeds {tol:.3e}")]
    NotHermitian { deviation: f64, tol: f64 },

    #[error("assumption violated ({assumption}): {detail}")]
    AssumptionViolated { assumption: String, detail: String },

    #[error("degenerate spectrum: rate-chain criterion inapplicable")]
    DegenerateSpectrum,

    #[error("Assumption 2 (FGR) fails: {0}")]
    FgrFails(String),

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("dimension cap exceeded: total dimension {dim} > cap {cap}; {hint}")]
    CapExceeded { dim: usize, cap: usize, hint: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("linear algebra backend error: {0}")]
    Linalg(String),

    #[error("certificate failure ({stage}): {detail}")]
    Certificate { stage: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 2 for assumption-certificate failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::AssumptionViolated { .. }
            | Error::FgrFails(_)
            | Error::Certificate { .. } => 2,
            _ => 1,
        }
    }
}
