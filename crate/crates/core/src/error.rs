use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("irregular sampling: gap {found} at row {row} differs from interval {expected}")]
    IrregularSampling { row: usize, expected: i64, found: i64 },
    #[error("malformed value at row {row}: {detail}")]
    MalformedValue { row: usize, detail: String },
    #[error("empty trace: {0}")]
    EmptyTrace(String),
    #[error("trace too short: need {needed} rows, have {have}")]
    TraceTooShort { needed: usize, have: usize },
    #[error("empty range")]
    EmptyRange,
    #[error("wmape denominator is not positive ({0})")]
    UndefinedDenominator(f64),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("non-invertible affine: r1 = 0")]
    NonInvertibleAffine,
    #[error("numerical instability in {0}")]
    NumericalInstability(String),
    #[error("forward trace does not match parameters: {0}")]
    TraceMismatch(String),
    #[error("checkpoint format version mismatch: file {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
