use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        section: String,
        key: String,
        line: usize,
    },
    #[error("line {line}: missing key `{key}` in [{section}]")]
    MissingKey {
        section: String,
        key: String,
        line: usize,
    },
    #[error("line {line}: duplicate key `{key}` in [{section}]")]
    DuplicateKey {
        section: String,
        key: String,
        line: usize,
    },
    #[error("line {line}: bad value for `{key}` in [{section}]: {reason}")]
    BadValue {
        section: String,
        key: String,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("model parse error: {0}")]
    Parse(#[from] FormatError),
    #[error("invalid model: {field}: {reason}")]
    Validation { field: String, reason: String },
}

impl ModelError {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Raised when the gravity torque alone already violates the torque box,
/// so no external force can be admitted at that pose.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("gravity torque infeasible at joint {joint}: |{gravity:.4}| > {limit:.4} N·m")]
pub struct InfeasibleGravity {
    pub joint: usize,
    pub gravity: f64,
    pub limit: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("action has length {got}, expected {expected}")]
    ActionLength { expected: usize, got: usize },
    #[error("non-finite action component {index}: {value}")]
    NonFiniteAction { index: usize, value: f64 },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Format(#[from] FormatError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("simulation error: {0}")]
    Sim(#[from] SimError),
    #[error("non-finite {what} at update {update}: {detail}")]
    NonFinite {
        what: String,
        update: usize,
        detail: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint/model mismatch: {0}")]
    ModelMismatch(String),
    #[error("invalid evaluation argument: {0}")]
    Argument(String),
}
