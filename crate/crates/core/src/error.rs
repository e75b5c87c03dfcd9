//! Error types for the library, grouped by subsystem.

use std::path::PathBuf;
use thiserror::Error;

/// Dataset loading, synthesis, and decoding failures.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing dataset directory: {0}")]
    MissingDirectory(PathBuf),
    #[error("dataset at {0} contains no complete samples")]
    EmptyDataset(PathBuf),
    #[error("label value {value} out of range (class count {classes}) in {file}")]
    LabelOutOfRange {
        file: PathBuf,
        value: u8,
        classes: usize,
    },
    #[error("failed to decode {file}: {reason}")]
    DecodeError { file: PathBuf, reason: String },
    #[error("spatial shape mismatch for sample {id}: {detail}")]
    ShapeMismatch { id: String, detail: String },
    #[error("unknown sample id: {0}")]
    UnknownSample(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Model construction and forward-pass failures.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image dims {h}x{w} not divisible by {requirement}")]
    ShapeError {
        h: usize,
        w: usize,
        requirement: String,
    },
    #[error("checkpoint incompatible with model config: {0}")]
    CheckpointMismatch(String),
    #[error("token grid mismatch: {0}")]
    GridMismatch(String),
    #[error("pyramid level mismatch: {0}")]
    LevelMismatch(String),
    #[error("visual width {visual} does not match text width {text} and no projection is configured")]
    WidthMismatch { visual: usize, text: usize },
    #[error("prompt sequence length {required} exceeds text encoder limit {max}; reduce context length by {excess} tokens")]
    SequenceTooLong {
        required: usize,
        max: usize,
        excess: usize,
    },
    #[error("non-finite values in input {0}")]
    NonFiniteInput(String),
    #[error("unknown word {word:?} for class {class:?}")]
    UnknownWord { word: String, class: String },
}

/// Training-loop failures.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("binary target contains value {0}, expected 0 or 1")]
    NonBinaryTarget(u8),
    #[error("frozen parameter {name} changed during stage {stage}")]
    FrozenParameterDrift { name: String, stage: String },
    #[error("loss diverged to non-finite value at step {step}")]
    DivergedLoss { step: usize },
    #[error("stage requires a checkpoint with completed stages {required:?}, found {found:?}")]
    MissingStage {
        required: Vec<String>,
        found: Vec<String>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Checkpoint serialization failures.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint config fingerprint {found} does not match expected {expected}")]
    FingerprintMismatch { found: String, expected: String },
    #[error("corrupt checkpoint file: {0}")]
    CorruptFile(String),
    #[error("checkpoint is missing parameter {0}")]
    MissingParameter(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Metric computation failures.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("label maps disagree in shape: {0}")]
    ShapeMismatch(String),
    #[error("label value {value} out of range (class count {classes})")]
    LabelOutOfRange { value: u8, classes: usize },
}
