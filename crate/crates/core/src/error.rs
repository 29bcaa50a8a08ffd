use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{what} index {index} out of range (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value rejected: {0}")]
    NonFinite(String),

    #[error("batch norm running statistics are uninitialized; run a training step first")]
    UninitializedStatistics,

    #[error("invalid architecture at layer {index}: {msg}")]
    Architecture { index: usize, msg: String },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("non-finite gradient in {layer} at step {step}")]
    Training { layer: String, step: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dimension {
        op,
        detail: detail.into(),
    })
}
