use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("hidden_dim mismatch: hidden_dim {hidden_dim} != num_heads {num_heads} * head_dim {head_dim}")]
    HiddenDimMismatch {
        hidden_dim: usize,
        num_heads: usize,
        head_dim: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("truncated weight file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("bad magic header: expected \"FKV1\"")]
    BadMagic,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("token {token} out of vocab range (vocab_size {vocab_size})")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("pooling kernel must be odd and >= 1, got {0}")]
    InvalidKernel(usize),

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{name} must be in (0, 1], got {value}")]
    InvalidRate { name: &'static str, value: f64 },

    #[error("context of {context} tokens is shorter than the observation window {window}")]
    ContextShorterThanWindow { context: usize, window: usize },

    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("calibration set is empty")]
    EmptyCalibrationSet,

    #[error("oracle guard exceeded: {0}")]
    OracleGuard(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
