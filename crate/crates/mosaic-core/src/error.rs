//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors shared by all modules of the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Matrix or vector shapes are incompatible with the requested operation.
    Dimension(String),
    /// A numeric precondition failed (non-finite value, zero norm, ...).
    Numeric(String),
    /// Annotations or masks disagree with the attribute schema.
    Validation(String),
    /// A configuration value is out of its admissible range.
    Config(String),
    /// A dataset is empty or its split is infeasible.
    Dataset(String),
    /// The evaluation protocol cannot produce a result (e.g. every query
    /// was filtered out by the cross-camera rule).
    Protocol(String),
    /// The design matrix is rank deficient; the payload names aliased columns.
    SingularDesign(String),
    /// A named fixture or parameter path does not exist.
    NotFound(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Dataset(m) => write!(f, "dataset error: {m}"),
            Error::Protocol(m) => write!(f, "protocol error: {m}"),
            Error::SingularDesign(m) => write!(f, "singular design: {m}"),
            Error::NotFound(m) => write!(f, "not found: {m}"),
        }
    }
}

impl core::error::Error for Error {}

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
