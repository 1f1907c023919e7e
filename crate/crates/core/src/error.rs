use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("size must be at least 2, got {0}")]
    TooSmall(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("entry {index} must be strictly positive, got {value}")]
    NonPositive { index: usize, value: f64 },

    #[error("invalid weight law `{input}`: {reason}; valid forms are exp:<rate>, invpow:<alpha>, const:<c>, bern:<p>:<law>")]
    BadLaw { input: String, reason: String },

    #[error("invalid vertex-weight spec `{input}`: {reason}; valid forms are const:<c>, iid:<law>, explicit:<v1,v2,...>")]
    BadVertexSpec { input: String, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("row {row} has zero row sum (isolated row)")]
    IsolatedRow { row: usize },

    #[error("row {row} has zero off-diagonal row sum")]
    IsolatedJumpRow { row: usize },

    #[error("matrix is not a valid {kind}: {reason}")]
    NotMarkov { kind: &'static str, reason: String },

    #[error("vector is not a probability distribution: {0}")]
    NotProbability(String),

    #[error("support is reducible")]
    Reducible,

    #[error("power iteration did not converge within {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("system is singular beyond the normalization redundancy (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("size {n} is out of range for {mode} (max {max})")]
    SizeOutOfRange { n: usize, mode: &'static str, max: usize },

    #[error("all spanning-tree weights are zero")]
    ZeroTreeWeight,

    #[error("moment precondition violated: {0}")]
    InfiniteMoment(String),

    #[error("degenerate law {0} is only accepted as a test fixture")]
    DegenerateLaw(String),

    #[error("{0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
