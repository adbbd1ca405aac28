//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BeraError {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("too few clean-success episodes: need at least {need}, got {got}")]
    TooFewCleanEpisodes { need: usize, got: usize },

    #[error("layer {layer} out of range (stack holds layers {lo}..={hi})")]
    LayerOutOfRange { layer: usize, lo: usize, hi: usize },

    #[error("index {index} out of range for universe of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("token universes differ: {left} vs {right}")]
    UniverseMismatch { left: usize, right: usize },

    #[error("all clusters empty after fit")]
    AllClustersEmpty,

    #[error("image dimensions {h}x{w} not divisible by patch size {p}")]
    IndivisibleDimensions { h: usize, w: usize, p: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("trigger footprint exceeds canvas bounds")]
    FootprintOverflow,

    #[error("encoder construction failed after {attempts} attempts: {reason}")]
    ConstructionFailed { attempts: usize, reason: String },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BeraError {
    /// True for errors caused by bad user input (config, arguments,
    /// malformed requests) as opposed to runtime failures. The CLI maps
    /// validation errors to exit code 2 and runtime errors to 3.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            BeraError::DimensionMismatch { .. }
                | BeraError::ShapeMismatch(_)
                | BeraError::DomainError(_)
                | BeraError::EmptyInput(_)
                | BeraError::TooFewSamples { .. }
                | BeraError::TooFewCleanEpisodes { .. }
                | BeraError::LayerOutOfRange { .. }
                | BeraError::IndexOutOfRange { .. }
                | BeraError::UniverseMismatch { .. }
                | BeraError::IndivisibleDimensions { .. }
                | BeraError::FootprintOverflow
                | BeraError::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, BeraError>;
