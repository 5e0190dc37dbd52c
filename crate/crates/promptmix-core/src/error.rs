//! Error type shared by every module in the crate.
//!
//! One enum keeps matching exhaustive at call sites and gives the CLI a
//! single place to map failures onto process exit codes.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Input data failed a semantic check (duplicate ids, unknown attribute,
    /// inconsistent schema). The message names the offending record.
    Validation(String),
    /// A line of an input file could not be decoded. `line` is 1-based.
    Parse { line: usize, message: String },
    /// A function argument was out of range or inconsistent with its peers.
    Argument(String),
    /// Exemplar retrieval could not produce a usable candidate pool.
    Retrieval(String),
    /// Prompt assembly referenced an attribute with no tuned prompt.
    Assembly { attribute: String },
    /// More conditioning attributes than the convolution mixer was built for.
    Capacity { n: usize, max: usize },
    /// Mixer or model parameters have the wrong shape for the operation.
    Parameter(String),
    /// A checkpoint was written by an incompatible format version.
    VersionMismatch { found: String, supported: String },
    /// A checkpoint or artifact file is structurally damaged.
    Corrupt(String),
    /// Two sequences that must agree in length do not.
    Length { expected: usize, got: usize },
    /// A numeric invariant broke (NaN, Inf, diverging loss).
    Numeric(String),
    /// Student training failed to converge or was misconfigured.
    Training(String),
    /// The language-model backend reported a failure.
    Backend(String),
    /// A pipeline stage ran before the stage it depends on.
    StageOrder { stage: String, missing: String },
    /// The requested operation is not available on this backend.
    Unsupported(String),
    Io(std::io::Error),
}

impl Error {
    /// Process exit code the CLI reports for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Parse { .. } | Error::Argument(_) => 2,
            Error::StageOrder { .. } => 3,
            Error::Numeric(_) | Error::Training(_) => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(msg) => write!(f, "validation failed: {msg}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Argument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Retrieval(msg) => write!(f, "exemplar retrieval failed: {msg}"),
            Error::Assembly { attribute } => {
                write!(f, "no soft prompt available for attribute '{attribute}'")
            }
            Error::Capacity { n, max } => {
                write!(f, "{n} attributes exceed mixer capacity of {max}")
            }
            Error::Parameter(msg) => write!(f, "parameter error: {msg}"),
            Error::VersionMismatch { found, supported } => {
                write!(f, "checkpoint version {found} is not compatible with {supported}")
            }
            Error::Corrupt(msg) => write!(f, "corrupt file: {msg}"),
            Error::Length { expected, got } => {
                write!(f, "length mismatch: expected {expected}, got {got}")
            }
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::Training(msg) => write!(f, "training failed: {msg}"),
            Error::Backend(msg) => write!(f, "backend error: {msg}"),
            Error::StageOrder { stage, missing } => {
                write!(f, "stage '{stage}' requires '{missing}' to have completed")
            }
            Error::Unsupported(msg) => write!(f, "unsupported operation: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
