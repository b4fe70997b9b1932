use thiserror::Error;

/// Errors produced by the kernels, denoisers, scheduler and cost model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid denoiser config: {field}: {reason}")]
    DenoiserConfig { field: &'static str, reason: String },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid cost model parameters: {0}")]
    CostModel(String),

    #[error("trace does not match cost model structure: {0}")]
    TraceMismatch(String),

    #[error("top-k: k = {k} exceeds length {len}")]
    TopK { k: usize, len: usize },

    #[error("index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty mask: skip the large model instead of running a masked forward")]
    EmptyMask,

    #[error("non-finite value in latent at step {step}")]
    NonFinite { step: usize },

    #[error("grid format: {0}")]
    Format(String),

    #[error("config parse error at line {line}, column {column}: {msg}")]
    ConfigParse { line: usize, column: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape { op, detail: detail.into() })
}
