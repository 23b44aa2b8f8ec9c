//! Error type shared by every module.

use std::fmt;
use std::path::PathBuf;

/// Library-wide error enum. Variants map onto the CLI exit-code contract:
/// usage/input problems (`Dim`, `Config`, `Lookup`, `Format`, `Io`) exit 2,
/// numerical failures (`Eval`, `Train`) exit 3.
#[derive(Debug)]
pub enum Error {
    /// Shape/extent mismatch; names both shapes involved.
    Dim {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// Invalid configuration value (bad radius, even kernel, T too small, ...).
    Config(String),
    /// A forward evaluation produced a non-finite value.
    Eval(String),
    /// Unknown name in a registry lookup (e.g. gradcheck op).
    Lookup(String),
    /// Malformed file contents (TSR1 header, manifest, labels.csv).
    Format(String),
    /// Filesystem failure with the path involved.
    Io { path: PathBuf, source: std::io::Error },
    /// Training diverged or otherwise failed at a known epoch.
    Train { epoch: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, expected: impl fmt::Display, got: impl fmt::Display) -> Self {
        Error::Dim {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim { op, expected, got } => {
                write!(f, "{op}: dimension mismatch: expected {expected}, got {got}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Eval(msg) => write!(f, "evaluation error: {msg}"),
            Error::Lookup(msg) => write!(f, "lookup error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Train { epoch, message } => {
                write!(f, "training error at epoch {epoch}: {message}")
            }
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dim_error_names_both_shapes() {
        let e = Error::dim("conv_pointwise", "[2, 3]", "[4, 5]");
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(msg.contains("[4, 5]"), "{msg}");
    }
}
