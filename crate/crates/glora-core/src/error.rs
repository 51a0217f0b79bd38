//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands cannot be combined by the named operation.
    #[error(
        "{op}: shape mismatch, left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}"
    )]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    /// A kind/role/rank combination or model description is inadmissible.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A caller broke an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Divergence { iteration: usize },
    /// A persisted file does not follow the documented layout.
    #[error("bad file format: {0}")]
    Format(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
