use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid sentence {id}: {message}")]
    Validation { id: String, message: String },

    #[error("alignment error: tokenizer produced no subwords for token {index} ({token:?})")]
    Alignment { index: usize, token: String },

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("embedding file does not cover sentence ids: {}", missing.join(", "))]
    Coverage { missing: Vec<String> },

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("malformed decision sequence at step {step}: {message}")]
    Structure { step: usize, message: String },

    #[error("illegal transition: {decision} in state {state}")]
    Transition { decision: String, state: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss at {context}")]
    Numeric { context: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("prediction/gold alignment error: {0}")]
    IdMismatch(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("{0} trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint was trained with scheme {stored}, refusing to run with scheme {requested}")]
    SchemeMismatch { stored: String, requested: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
