//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the public operations.
///
/// Internal shape invariants between composed tape ops are enforced with
/// assertions instead; only contract-level failures (bad caller input,
/// malformed files, diverged training) travel through `Error`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor or mask shapes do not satisfy an operation's contract.
    Shape(String),
    /// Input values are invalid (non-finite entries, out-of-range ids, ...).
    Value(String),
    /// A configuration key or value was rejected.
    Config(String),
    /// A serialized artifact (checkpoint, report) failed to parse.
    Format(String),
    /// A named entity (gradient check, parameter, sequence) does not exist.
    NotFound(String),
    /// Training aborted (non-finite loss, impossible sampling constraints).
    Train(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Value(m) => write!(f, "invalid value: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::NotFound(m) => write!(f, "not found: {m}"),
            Error::Train(m) => write!(f, "training error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
