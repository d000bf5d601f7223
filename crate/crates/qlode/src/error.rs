use thiserror::Error;

/// Errors produced by the estimation library.
///
/// The three variants map onto the failure categories surfaced by the CLI:
/// configuration problems, data/domain problems and numeric failures.
#[derive(Error, Debug, Clone)]
pub enum Error {
    /// A requested configuration is structurally invalid (bad dimensions,
    /// nonpositive counts, inconsistent options).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An input value lies outside the domain the operation is defined on
    /// (e.g. an evaluation time outside the basis interval).
    #[error("domain error: {0}")]
    Domain(String),

    /// A numeric computation failed (singular system, non-finite value,
    /// degenerate fit).
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
