use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{kernel}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        kernel: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parse error at row {row}, column {col}: {message}")]
    Parse {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("function is not reproducible: {0}")]
    Reproducibility(String),

    #[error("conditional undefined: zero probability for stratum {0}")]
    UndefinedConditional(String),

    #[error("joint table of {0} entries exceeds the enumeration limit")]
    SizeLimit(usize),

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
