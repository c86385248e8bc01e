use thiserror::Error;

/// Errors raised by problem construction, sampling, stepsize rules, and the solver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index {index} out of range for {len} constraints")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid subgradient pairing at coordinate {coord} (violation {violation:e})")]
    InvalidSubgradient { coord: usize, violation: f64 },

    #[error("row {row} has norm {norm} (expected unit norm)")]
    NonUnitRow { row: usize, norm: f64 },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid mini-batch: {0}")]
    InvalidBatch(String),

    #[error("block size {tau} out of range for {m} constraints")]
    BlockSizeOutOfRange { tau: usize, m: usize },

    #[error("matrix is zero")]
    ZeroMatrix,

    #[error("degenerate batch: all sampled gradients vanish")]
    DegenerateBatch,

    #[error("degenerate halfspace: normal vector is zero")]
    DegenerateHalfspace,

    #[error("bracket for the exact stepsize did not change sign after {doublings} doublings")]
    DivergingBracket { doublings: usize },

    #[error("reference vector is zero")]
    ZeroReference,

    #[error("matrix appears rank deficient after {attempts} attempts")]
    RankDeficient { attempts: usize },

    #[error("dimension {n} exceeds the enumeration limit {max}")]
    DimensionTooLarge { n: usize, max: usize },

    #[error("vector is zero")]
    ZeroVector,

    #[error("incompatible run: {0}")]
    IncompatibleRun(String),

    #[error("non-finite iterate at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
