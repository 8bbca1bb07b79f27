use thiserror::Error;

/// Errors raised anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input that makes the requested operation meaningless (zero mass, empty support).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A documented precondition does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Shapes, geometries or stored state do not match what the caller promised.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Division by zero, overflow or a non-finite value inside an iterative computation.
    #[error("numerical breakdown in {location}: {detail}")]
    NumericalBreakdown { location: String, detail: String },

    /// Instance exceeds the size limit of an exact solver.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Malformed serialized data.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn breakdown(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NumericalBreakdown {
            location: location.into(),
            detail: detail.into(),
        }
    }

    /// True for failures caused by floating-point breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalBreakdown { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
