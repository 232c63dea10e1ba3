use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error(
        "function is not deterministic: two evaluations at the same point differ; \
         run in inference mode or with a fixed dropout mask"
    )]
    NonDeterministic,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("dimension overflow: {0}")]
    DimOverflow(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("pixel (row {row}, col {col}) has no valid observation")]
    NoValidObservation { row: usize, col: usize },

    #[error("required band `{0}` is missing")]
    MissingBand(String),

    #[error("band `{0}` is constant over the time series and cannot be normalized")]
    ConstantBand(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
