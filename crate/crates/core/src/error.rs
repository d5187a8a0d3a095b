use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    /// A forward trace or gradient does not belong to the parameters it is
    /// being combined with.
    #[error("inconsistent state: {0}")]
    Consistency(String),

    #[error("malformed file{}: {message}", location(.offset, .field))]
    Format {
        offset: Option<usize>,
        field: Option<String>,
        message: String,
    },

    #[error("unsupported checkpoint version {0} (expected 1)")]
    UnsupportedVersion(u64),

    #[error(
        "training diverged in epoch {epoch}: non-finite loss (lambda={lambda}, lr={learning_rate})"
    )]
    Diverged {
        epoch: usize,
        lambda: f64,
        learning_rate: f64,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

fn location(offset: &Option<usize>, field: &Option<String>) -> String {
    match (offset, field) {
        (Some(o), Some(f)) => format!(" at byte {o} (field `{f}`)"),
        (Some(o), None) => format!(" at byte {o}"),
        (None, Some(f)) => format!(" (field `{f}`)"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            offset: None,
            field: Some(field.into()),
            message: message.into(),
        }
    }
}
