//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("diffusion step {t} out of range 0..{t_steps}")]
    StepOutOfRange { t: usize, t_steps: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("flat vector length {got} does not match expected {expected}")]
    LengthMismatch { got: usize, expected: usize },

    #[error("clip has {0} frame(s); at least 2 required")]
    TooFewFrames(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty {0} split")]
    EmptySplit(&'static str),

    #[error("zero-norm embedding")]
    DegenerateEmbedding,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("client {0} diverged (non-finite local loss)")]
    Divergence(usize),

    #[error("client {0} is not a session participant")]
    NotParticipant(usize),

    #[error("received and dropped sets must partition the participants")]
    BadDropoutSets,

    #[error("no client updates to aggregate")]
    EmptyUpdateSet,

    #[error("{context}: expected {expected} entries, got {got}")]
    CountMismatch { context: &'static str, expected: usize, got: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),
}
