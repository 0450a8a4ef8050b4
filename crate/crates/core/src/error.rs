use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("allocation error: {0}")]
    Allocation(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("numeric input error: {0}")]
    NumericInput(String),

    /// A non-finite gradient or loss during optimization.
    #[error("numeric error in parameter `{param}`: {reason}")]
    Numeric { param: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("transfer error: {0}")]
    Transfer(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("fold (repeat {repeat}, fold {fold}): {source}")]
    Fold {
        repeat: usize,
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
