use alloc::string::String;

use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

/// Failures raised anywhere in the reserving core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("duplicate cell ({accident}, {development})")]
    DuplicateCell { accident: u32, development: u32 },

    #[error("cell ({accident}, {development}) lies outside a {size}x{size} triangle")]
    CellOutOfRange { accident: u32, development: u32, size: u32 },

    #[error("negative amount {value} at cell ({accident}, {development})")]
    NegativeAmount { accident: u32, development: u32, value: f64 },

    #[error("non-finite amount at cell ({accident}, {development})")]
    NonFiniteAmount { accident: u32, development: u32 },

    #[error("upper triangle is incomplete: cell ({accident}, {development}) is missing")]
    IncompleteTriangle { accident: u32, development: u32 },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid distribution parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("design matrix is rank deficient (pivot {pivot} at column {column})")]
    RankDeficient { column: usize, pivot: f64 },

    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("separation detected in logistic fit")]
    Separation,

    #[error("degenerate dispersion estimate: {0}")]
    DegenerateDispersion(String),

    #[error("missing {0} triangle")]
    MissingTriangle(&'static str),

    #[error("every component has zero density at validation cell ({accident}, {development})")]
    ZeroMixtureDensity { accident: u32, development: u32 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("observation {y} lies outside the CRPS grid [{lower}, {upper}]")]
    OutsideGrid { y: f64, lower: f64, upper: f64 },
}
