use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("signal too short: {len} samples, need at least {min}")]
    SignalTooShort { len: usize, min: usize },
    #[error("invalid STFT configuration: {0}")]
    InvalidStftConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask ratio {0} outside (0, 0.5]")]
    InvalidMaskRatio(f64),
    #[error("empty codebook")]
    EmptyCodebook,
    #[error("no codebook id with parity {0}")]
    EmptyParityClass(u8),
    #[error("capacity exceeded: {requested} bits requested, at most {capacity} fit in {frames} frames")]
    CapacityExceeded { requested: usize, capacity: usize, frames: usize },
    #[error("invalid watermark plan: {0}")]
    InvalidPlan(String),
    #[error("models are untrained: {0}")]
    Untrained(String),
    #[error("invalid bit string: {0}")]
    InvalidBits(String),
    #[error("degenerate false-positive rate {0}: must lie strictly between 0 and 1")]
    DegenerateRate(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("external codec unavailable: {0}")]
    CodecUnavailable(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("malformed checkpoint {path}: {reason}")]
    MalformedCheckpoint { path: PathBuf, reason: String },
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
