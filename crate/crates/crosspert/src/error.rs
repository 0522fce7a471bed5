//! Crate-wide error type. Every failure carries enough context to act on
//! (file, line, layer index, offending term) and maps onto a stable CLI
//! exit code.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad dimensions, ratios, unknown names, flag misuse.
    #[error("configuration error: {0}")]
    Config(String),

    /// Filesystem failure while reading or writing `path`.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite value where finite math was required (forward pass, loss, gradient).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Tensor or batch dimensions that do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Malformed text input (TSV/JSON), with a 1-based line number where known.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Dataset-level violation: missing controls, unknown labels, header mismatch.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint directory contents that cannot be loaded back.
    #[error("checkpoint format error: {0}")]
    Format(String),

    /// A metric whose value is undefined for the given input (e.g. constant actual).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// API misuse, e.g. asking for gradients from an eval-mode trace.
    #[error("usage error: {0}")]
    Usage(String),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 i/o, 4 numeric, 5 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Shape(_)
            | Error::Parse { .. }
            | Error::Data(_)
            | Error::Format(_)
            | Error::UndefinedMetric(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Usage("x".into()).exit_code(), 2);
        assert_eq!(
            Error::io("/tmp/x", std::io::Error::new(std::io::ErrorKind::Other, "boom"))
                .exit_code(),
            3
        );
        assert_eq!(Error::Numeric("x".into()).exit_code(), 4);
        assert_eq!(Error::Shape("x".into()).exit_code(), 5);
        assert_eq!(
            Error::Parse {
                line: 3,
                message: "x".into()
            }
            .exit_code(),
            5
        );
        assert_eq!(Error::Data("x".into()).exit_code(), 5);
        assert_eq!(Error::Format("x".into()).exit_code(), 5);
        assert_eq!(Error::UndefinedMetric("x".into()).exit_code(), 5);
    }

    #[test]
    fn parse_error_names_the_line() {
        let e = Error::Parse {
            line: 17,
            message: "expected 6 fields, found 5".into(),
        };
        assert!(e.to_string().contains("line 17"));
    }
}
