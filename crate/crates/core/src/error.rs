use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },

    #[error("room impulse response is empty or all zero")]
    EmptyRir,

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask index {index} out of range for {frames} frames")]
    MaskOutOfRange { index: usize, frames: usize },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("missing asset: {0}")]
    MissingAsset(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("metric client `{client}` failed: {detail}")]
    Client { client: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
