use std::path::PathBuf;

use crate::prune::ChannelRef;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Each variant maps to a stable machine-readable code via [`Error::code`],
/// which the CLI prints on its error line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected}, got {got}")]
    Shape {
        layer: usize,
        expected: String,
        got: String,
    },
    #[error("train-mode batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("label row {row} sums to {sum}, expected 1")]
    LabelRowSum { row: usize, sum: f64 },
    #[error("backward called without a cached train-mode forward pass")]
    NoTape,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("invalid architecture spec: {0}")]
    InvalidSpec(String),
    #[error("network has no batch-normalization layer")]
    NoBatchNorm,
    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("degenerate distribution: standard deviation is zero")]
    DegenerateDistribution,
    #[error("degenerate regressor: all x values are equal")]
    DegenerateRegressor,
    #[error("degenerate input: {0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("x values must be strictly increasing (violated at index {0})")]
    NonMonotoneX(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("structural constraint violated by channel {channel}: {reason}")]
    Structural { channel: ChannelRef, reason: String },
    #[error("pruned network has more parameters ({pruned}) than the original ({original})")]
    PrunedLarger { original: usize, pruned: usize },
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint blob truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("checkpoint checksum mismatch (expected {expected}, computed {actual})")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported audio: {0}")]
    Audio(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape_mismatch",
            Error::BatchTooSmall(_) => "batch_too_small",
            Error::LabelRowSum { .. } => "label_row_sum",
            Error::NoTape => "no_tape",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::NoBatchNorm => "no_batch_norm",
            Error::TooFewValues { .. } => "too_few_values",
            Error::DegenerateDistribution => "degenerate_distribution",
            Error::DegenerateRegressor => "degenerate_regressor",
            Error::ZeroVariance(_) => "zero_variance",
            Error::LengthMismatch(..) => "length_mismatch",
            Error::NonMonotoneX(_) => "non_monotone_x",
            Error::NonFinite(_) => "non_finite",
            Error::Structural { .. } => "structural_constraint",
            Error::PrunedLarger { .. } => "pruned_larger",
            Error::Divergence { .. } => "divergence",
            Error::Evaluation(_) => "evaluation_failed",
            Error::VersionMismatch { .. } => "checkpoint_version",
            Error::Truncated { .. } => "checkpoint_truncated",
            Error::ChecksumMismatch { .. } => "checkpoint_checksum",
            Error::MalformedCheckpoint(_) => "checkpoint_malformed",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Audio(_) => "audio",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(layer: usize, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            layer,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
