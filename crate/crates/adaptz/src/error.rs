//! Error type shared by the whole crate.
//!
//! Variants mirror the failure classes of the estimation pipeline: bad
//! caller input (`Usage`, `Parameter`, `Config`), statistically degenerate
//! inputs that must not be silently regularized (`DegenerateDesign`,
//! `DegenerateProbability`, `RootBracketing`), and I/O or parse failures
//! from the harness.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The caller violated an API precondition (empty input, bad fold, …).
    #[error("usage: {0}")]
    Usage(String),

    /// A numeric parameter is outside its admissible range.
    #[error("parameter: {0}")]
    Parameter(String),

    /// A configuration value is inconsistent or out of range.
    #[error("config: {0}")]
    Config(String),

    /// The estimating equations are (numerically) singular, typically
    /// because some arms were never explored. Reported, never regularized:
    /// silent ridge would bias the inference.
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    /// A weighting covariance is not positive definite, typically because
    /// a selection probability or a variance weight collapsed to zero.
    #[error("degenerate probability: {0}")]
    DegenerateProbability(String),

    /// A scalar root finder could not bracket a sign change.
    #[error("root bracketing: {0}")]
    RootBracketing(String),

    /// Malformed dataset or configuration file.
    #[error("parse: {0}")]
    Parse(String),

    /// Underlying I/O failure.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
