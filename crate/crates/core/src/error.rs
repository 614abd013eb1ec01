use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph specification: {0}")]
    InvalidGraph(String),

    #[error("only {found} of {needed} repeating eigenvalues satisfy the bound with K={n_copies} copies; increase K")]
    InsufficientEigenvalues {
        needed: usize,
        found: usize,
        n_copies: usize,
    },

    #[error("dense oracle of size {size} exceeds the limit of {limit} nodes")]
    OracleTooLarge { size: usize, limit: usize },

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("point set has zero diameter")]
    ZeroDiameter,

    #[error("fit diverged at layer {layer}")]
    FitDiverged { layer: usize },

    #[error("inversion did not converge in layer {layer}: residual {residual:e} after {iterations} iterations")]
    InversionFailed {
        layer: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error("unsupported document version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::InsufficientEigenvalues { .. } | Error::FitDiverged { .. } | Error::InversionFailed { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
