use std::path::PathBuf;

/// Errors produced anywhere in the separation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed MIDI at byte {offset}: {message}")]
    Midi { offset: usize, message: String },

    #[error("dataset error at byte {offset}: {message}")]
    Dataset { offset: usize, message: String },

    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch at stage `{stage}`: expected {expected:?}, got {actual:?}")]
    Shape {
        stage: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("numeric guard: {0}")]
    Numeric(String),

    #[error("sampling fault at step {step}: non-finite values")]
    SamplingFault { step: usize },

    #[error("training fault in epoch {epoch}: {message}")]
    TrainingFault {
        epoch: usize,
        message: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("model state: {0}")]
    State(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
