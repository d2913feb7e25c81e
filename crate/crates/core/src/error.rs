use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("sequence of length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not enough distinct queries: need {needed}, family has {available}")]
    InsufficientQueries { needed: usize, available: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("checkpoint hash mismatch: expected {expected:#018x}, found {found:#018x}")]
    CheckpointMismatch { expected: u64, found: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
