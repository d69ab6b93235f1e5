use thiserror::Error;

/// Errors produced by the compressor library.
///
/// The CLI maps these onto exit statuses: `Shape`, `Contract` and
/// `Mismatch` are caller errors (exit 2), `Io` and `Format` are file
/// errors (exit 3), `Certification` is a failed verification run
/// (exit 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{0}")]
    Contract(String),

    #[error("params/config mismatch: {0}")]
    Mismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("certification failed: {0}")]
    Certification(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
