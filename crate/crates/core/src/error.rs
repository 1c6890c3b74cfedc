use crate::tensor::Precision;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("precision mismatch in {op}: {left:?} vs {right:?}")]
    Precision {
        op: &'static str,
        left: Precision,
        right: Precision,
    },

    #[error("index range [{from}, {to}) out of bounds for extent {extent} in {op}")]
    Range {
        op: &'static str,
        from: usize,
        to: usize,
        extent: usize,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
