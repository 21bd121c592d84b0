use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    DoubleBackward,

    #[error("checkpoint segment {0} replayed to different values")]
    NonDeterministicSegment(usize),

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid timesteps: t={t}, t_prev={t_prev}")]
    InvalidTimesteps { t: usize, t_prev: usize },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("negative radicand {0} in DDIM direction term")]
    NegativeRadicand(f64),

    #[error("DDIM inversion requires eta = 0, got {0}")]
    EtaNonZero(f64),

    #[error("training diverged at iteration {iteration}")]
    DivergedTraining { iteration: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("interpolation weight p = {0} outside [0, 1]")]
    POutOfRange(f64),

    #[error("loss mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("stream too short: {0} clips, need at least 2")]
    StreamTooShort(usize),

    #[error("frame {height}x{width} smaller than the {window}x{window} SSIM window")]
    FrameTooSmall { height: usize, width: usize, window: usize },

    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("eigendecomposition did not converge")]
    EigenFailure,

    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("bad magic in tensor file")]
    BadMagic,

    #[error("tensor shape overflows: {0:?}")]
    ShapeOverflow(Vec<u64>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable class name, printed by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::NotScalarLoss(_) => "NotScalarLoss",
            Error::DoubleBackward => "DoubleBackward",
            Error::NonDeterministicSegment(_) => "NonDeterministicSegment",
            Error::TimestepOutOfRange { .. } => "TimestepOutOfRange",
            Error::InvalidTimesteps { .. } => "InvalidTimesteps",
            Error::InvalidRange(_) => "InvalidRange",
            Error::NegativeRadicand(_) => "NegativeRadicand",
            Error::EtaNonZero(_) => "EtaNonZero",
            Error::DivergedTraining { .. } => "DivergedTraining",
            Error::NonFiniteGradient => "NonFiniteGradient",
            Error::POutOfRange(_) => "POutOfRange",
            Error::ModeMismatch(_) => "ModeMismatch",
            Error::StreamTooShort(_) => "StreamTooShort",
            Error::FrameTooSmall { .. } => "FrameTooSmall",
            Error::TooFewSamples(_) => "TooFewSamples",
            Error::DimensionMismatch(..) => "DimensionMismatch",
            Error::EigenFailure => "EigenFailure",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Precondition(_) => "Precondition",
            Error::BadMagic => "BadMagic",
            Error::ShapeOverflow(_) => "ShapeOverflow",
            Error::Io { .. } => "IoError",
        }
    }
}
