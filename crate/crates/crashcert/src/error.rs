use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between matrices, vectors, masks, or networks.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Exact enumeration was requested for more crashable neurons than the cap allows.
    #[error(
        "exact enumeration infeasible: {count} crashable neurons exceed the cap of {cap} \
         (2^{count} crash configurations); restrict the layer subset or use sampling"
    )]
    EnumerationInfeasible { count: usize, cap: usize },

    /// The requested target cannot be met: the mean error already exceeds the budget.
    #[error("infeasible: mean exceeds budget ({detail})")]
    Infeasible { detail: String },

    /// A configuration value is invalid.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Training diverged (non-finite loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A file did not match the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
