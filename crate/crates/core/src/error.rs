use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid prices: {0}")]
    InvalidPrices(String),

    #[error(
        "degenerate prices: real-time buy and sell prices coincide, newsvendor fractile undefined"
    )]
    DegeneratePrices,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("no scenario mass near alpha = {alpha} (bandwidth {bandwidth})")]
    EstimationSupport { alpha: f64, bandwidth: f64 },

    #[error("quadrature did not converge on [{lower}, {upper}]: estimated error {error_estimate:e} > tolerance {tolerance:e} after {intervals} subintervals")]
    Quadrature {
        lower: f64,
        upper: f64,
        error_estimate: f64,
        tolerance: f64,
        intervals: usize,
    },

    #[error("capacity exceeded: {what} (limit {limit}, got {got})")]
    Capacity {
        what: &'static str,
        limit: usize,
        got: usize,
    },

    #[error("data error{}: {message}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    Data { row: Option<usize>, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn data(message: impl Into<String>) -> Self {
        Error::Data {
            row: None,
            message: message.into(),
        }
    }

    pub(crate) fn data_at(row: usize, message: impl Into<String>) -> Self {
        Error::Data {
            row: Some(row),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
