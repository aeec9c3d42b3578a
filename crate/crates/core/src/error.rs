//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// All failure modes surfaced by the crate.
#[derive(Debug)]
pub enum Error {
    /// Two operands whose extents do not agree.
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// A mask left no valid entries where at least one is required.
    InvalidMask { op: &'static str, detail: String },
    /// Input outside an operation's numeric domain (e.g. log of a non-positive).
    Domain { op: &'static str, detail: String },
    /// A vector whose norm is too small to normalize.
    DegenerateVector { op: &'static str, norm: f64 },
    /// A caller broke an API contract (counts, labels, orderings).
    Contract(String),
    /// A file failed to parse; `detail` names the offending field or location.
    Parse { path: PathBuf, detail: String },
    /// Parsed data violated a schema invariant.
    Validation { path: PathBuf, detail: String },
    /// Checkpoint format version does not match this build.
    IncompatibleVersion { found: u32, expected: u32 },
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, step: usize, loss: f64 },
    /// Underlying I/O failure.
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => write!(
                f,
                "{op}: shape mismatch between {}x{} and {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            Error::InvalidMask { op, detail } => write!(f, "{op}: invalid mask: {detail}"),
            Error::Domain { op, detail } => write!(f, "{op}: domain error: {detail}"),
            Error::DegenerateVector { op, norm } => {
                write!(f, "{op}: vector norm {norm:.3e} is below 1e-12")
            }
            Error::Contract(detail) => write!(f, "contract violation: {detail}"),
            Error::Parse { path, detail } => {
                write!(f, "parse error in {}: {detail}", path.display())
            }
            Error::Validation { path, detail } => {
                write!(f, "invalid data in {}: {detail}", path.display())
            }
            Error::IncompatibleVersion { found, expected } => write!(
                f,
                "checkpoint version {found} is not supported (expected {expected})"
            ),
            Error::Diverged { epoch, step, loss } => write!(
                f,
                "training diverged at epoch {epoch} step {step}: loss = {loss}"
            ),
            Error::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), detail: detail.into() }
    }

    pub fn validation(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Validation { path: path.into(), detail: detail.into() }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    /// True for errors caused by bad inputs or configuration (CLI exit 1);
    /// false for runtime failures such as I/O or divergence (CLI exit 2).
    pub fn is_usage(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Diverged { .. }
        )
    }
}
