use std::io;

use thiserror::Error;

/// Errors produced by the library.
///
/// The variants group into three families that the CLI maps onto exit codes:
/// data/format problems, numeric failures, and invalid arguments.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("row {row} has norm {norm} (expected 1 within {tol})")]
    NotUnitNorm { row: usize, norm: f64, tol: f64 },

    #[error("row {0} is the zero vector")]
    ZeroRow(usize),

    #[error("label {label} at row {row} is out of range for {n_classes} classes")]
    LabelOutOfRange { row: usize, label: u32, n_classes: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    /// True for failures caused by arithmetic (non-finite values, degenerate vectors).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::ZeroRow(_))
    }

    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidArgument(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
