use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("silhouette has no foreground pixel")]
    EmptySilhouette,
    #[error("foreground height {height}px is below the 2px minimum")]
    DegenerateBody { height: usize },
    #[error("corrupt frame {path}: {reason}")]
    CorruptFrame { path: PathBuf, reason: String },
    #[error("duplicate sequence id `{0}`")]
    DuplicateSequence(String),
    #[error("unknown sequence id `{0}`")]
    UnknownSequence(String),
    #[error("malformed container: {0}")]
    Format(String),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("view label {0} is missing from the training set")]
    MissingClass(usize),
    #[error("angle {0} has no merged view label")]
    UnknownView(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("feature map height {height} is not divisible into {parts} parts")]
    IndivisibleHeight { height: usize, parts: usize },
    #[error("zero-norm vector in similarity computation")]
    ZeroNormVector,
    #[error("configuration conflict: {0}")]
    ConfigConflict(String),
    #[error("batch contains no valid triplet")]
    DegenerateBatch,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("dataset has no subject labels for sequence `{0}`")]
    MissingLabels(String),
    #[error("sequence `{id}` lacks `{field}` metadata")]
    MissingMetadata { id: String, field: &'static str },
    #[error("probe `{0}` has no gallery candidate")]
    EmptyGalleryForProbe(String),
    #[error("empty set passed to `{0}`")]
    EmptySet(&'static str),
    #[error("augmentation subset is not contained in its superset")]
    SubsetViolation,
    #[error("augmentation neighbourhood is empty at chain step {0}")]
    EmptyAugSet(usize),
    #[error("parameter `{name}` = {value} out of range {range}")]
    ParamOutOfRange {
        name: &'static str,
        value: String,
        range: &'static str,
    },
    #[error("unknown configuration key `{key}`{}", line_suffix(*.line))]
    UnknownKey { key: String, line: Option<usize> },
    #[error("invalid value `{value}` for `{key}`{}: {reason}", line_suffix(*.line))]
    TypeError {
        key: String,
        value: String,
        line: Option<usize>,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn line_suffix(line: Option<usize>) -> String {
    match line {
        Some(l) => format!(" (line {l})"),
        None => String::new(),
    }
}
