use std::path::PathBuf;

use thiserror::Error;

use crate::volume::Dims;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid dimensions {0:?}: every axis must be at least 1")]
    EmptyDims(Dims),

    #[error("data length {actual} does not match {expected} values required by the grid")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("channel mismatch: expected {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("grid {0:?} is not divisible by 16 along every axis; pad the volume first")]
    NotDivisible(Dims),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("could not build a fold-free displacement field (max_disp = {max_disp}); try a smaller max_disp")]
    FoldingField { max_disp: f64 },

    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("expected 3D volume, file has dims {0:?}")]
    NotThreeD(Vec<usize>),

    #[error("unsupported volume file {path}: {reason}")]
    UnsupportedVolume { path: PathBuf, reason: String },

    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u8, expected: u8 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite {term} at step {step}")]
    Diverged { step: usize, term: String },

    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shapes(left: impl std::fmt::Debug, right: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            left: format!("{left:?}"),
            right: format!("{right:?}"),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Diverged { .. } | Error::FoldingField { .. }
        )
    }
}
