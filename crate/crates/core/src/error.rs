use thiserror::Error;

/// Errors raised anywhere in the estimation and testing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown column \"{0}\"")]
    UnknownColumn(String),

    #[error("column \"{0}\" must be numeric")]
    NonNumericColumn(String),

    #[error("column \"{column}\" has {levels} categorical levels, above the cap of {cap}")]
    TooManyLevels {
        column: String,
        levels: usize,
        cap: usize,
    },

    #[error("invalid filter expression \"{expr}\": {reason}")]
    Filter { expr: String, reason: String },

    #[error("invalid specification \"{label}\": {reason}")]
    InvalidSpecification { label: String, reason: String },

    #[error("specification \"{label}\" keeps {n_j} rows, needs at least {required}")]
    InsufficientRows {
        label: String,
        n_j: usize,
        required: usize,
    },

    #[error("specification \"{label}\": design matrix is rank deficient (collinear controls)")]
    RankDeficient { label: String },

    #[error("specification \"{label}\": treatment has no residual variation")]
    NoResidualVariation { label: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("covariance is ill-conditioned (condition number {condition:.3e}); consider adding a ridge")]
    IllConditioned { condition: f64 },

    #[error("quadratic program did not converge after {iterations} iterations")]
    QpNonConvergence { iterations: usize },

    #[error("{failed} of {replications} bootstrap replications were unestimable (limit 10%)")]
    TooManyUnestimable { failed: usize, replications: usize },

    #[error("bootstrap covariance has eigenvalue {min_eigenvalue:.3e} below tolerance {tolerance:.3e}")]
    NonPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for problems with the user's configuration or inputs, as opposed
    /// to failures of the estimation itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::UnknownColumn(_)
                | Error::NonNumericColumn(_)
                | Error::TooManyLevels { .. }
                | Error::Filter { .. }
                | Error::InvalidSpecification { .. }
                | Error::InvalidData(_)
                | Error::InvalidInput(_)
                | Error::Csv(_)
                | Error::Json(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
