//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("{context}: dimension {value} is not divisible by {divisor}")]
    Indivisible {
        context: String,
        value: usize,
        divisor: usize,
    },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("pixel values outside [-1, 1] in {context}")]
    PixelRange { context: String },

    #[error("zero-norm vector in {context}")]
    ZeroNorm { context: String },

    #[error("zero denominator in {context}")]
    ZeroDenominator { context: String },

    #[error("empty input in {context}")]
    EmptyInput { context: String },

    #[error("index ({i}, {j}) out of range for {rows}x{cols} grid")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        rows: usize,
        cols: usize,
    },

    #[error("degenerate clustering input: {reason}")]
    DegenerateClustering { reason: String },

    #[error("covariance is not positive semi-definite: min eigenvalue {min_eig}")]
    NotPsd { min_eig: f64 },

    #[error("latents look unnormalized: {reason}")]
    UnnormalizedLatents { reason: String },

    #[error("normalization statistics not found at {path} (run latent-stats or train-vae first)")]
    MissingNormStats { path: String },

    #[error("checkpoint mismatch: {reason}")]
    CheckpointMismatch { reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid sampler schedule: {0}")]
    InvalidSchedule(String),

    #[error("missing cached feature file for content hash {hash}")]
    MissingCachedFeature { hash: String },

    #[error("training aborted at step {step}: non-finite {term} (last good checkpoint retained)")]
    TrainingDiverged { step: u64, term: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
