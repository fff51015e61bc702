use thiserror::Error;

/// Errors raised by the closeness-testing library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("probability vector is empty")]
    EmptyVector,
    #[error("entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("probability vector sums to zero")]
    ZeroSum,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("sample size k = {k} is too small (need k >= {min})")]
    KTooSmall { k: u64, min: u64 },
    #[error("support size {d} exceeds the desk-scale cap of {cap}")]
    KTooLargeForDesk { d: u64, cap: u64 },
    #[error("Monte Carlo budget {n} is too small (need >= {min})")]
    BudgetTooSmall { n: usize, min: usize },
    #[error("rejection frequency stays above target {target} at multiplier {multiplier}")]
    Unreachable { target: f64, multiplier: f64 },
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("index set covers all probability mass; off-set renormalization is impossible")]
    RenormalizationImpossible,
    #[error("prior draw produced a negative coordinate {retries} times in a row")]
    RetryCapExceeded { retries: usize },
    #[error("sample has {got} observations, need at least {needed}")]
    SampleTooShort { needed: usize, got: usize },
    #[error("observation {value} is outside the support of size {d}")]
    CategoryOutOfRange { value: usize, d: usize },
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
