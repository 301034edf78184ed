use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("location {index} has no neighbors")]
    IsolatedLocation { index: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("column '{name}' is degenerate (constant)")]
    DegenerateColumn { name: String },

    #[error("design has no columns")]
    EmptyDesign,

    #[error("spatial parameter not identified: {0}")]
    NonIdentified(String),

    #[error("rank deficient system: {0}")]
    RankDeficient(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("iteration {m} out of range 0..={max}")]
    OutOfRange { m: usize, max: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error: 2 for input and validation problems,
    /// 3 for numerical or estimation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_)
            | Error::NonIdentified(_)
            | Error::RankDeficient(_)
            | Error::Singular(_) => 3,
            _ => 2,
        }
    }
}
