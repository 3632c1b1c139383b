use thiserror::Error;

/// Errors raised by estimation, resampling and simulation routines.
#[derive(Debug, Error)]
pub enum GmmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty or undersized dataset: {0}")]
    InsufficientData(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("just-identified model: J-test undefined")]
    JustIdentified,

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GmmError {
    /// True when the error stems from bad user input rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            GmmError::Dimension(_)
                | GmmError::InsufficientData(_)
                | GmmError::Unsupported(_)
                | GmmError::Input(_)
                | GmmError::Io(_)
                | GmmError::Csv(_)
                | GmmError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, GmmError>;
