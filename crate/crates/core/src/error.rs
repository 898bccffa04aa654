// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared across the toolkit.
//!
//! Every variant maps to a stable machine-greppable code (see
//! [`Error::code`]) that the CLI prints next to the human message.

use std::path::PathBuf;

/// Toolkit error.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("unknown condition `{0}`")]
    UnknownCondition(String),

    #[error("no padding positions available: {0}")]
    NoPadsAvailable(String),

    #[error("prompt has no EOS position")]
    NoEos,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("encoder mismatch: `{left}` vs `{right}`")]
    EncoderMismatch { left: String, right: String },

    #[error("layer mismatch: {left:?} vs {right:?}")]
    LayerMismatch {
        left: Option<u32>,
        right: Option<u32>,
    },

    #[error("prompt length {got} does not match backend length {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("vector is not unit-normalized (norm = {0})")]
    NotNormalized(f64),

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("attention label mismatch: {0}")]
    LabelMismatch(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("unsupported plan: {0}")]
    UnsupportedPlan(String),

    #[error("backend does not support capability `{0}`")]
    UnsupportedCapability(String),

    #[error("attention capture unsupported: {0}")]
    UnsupportedCapture(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("duplicate prompt id `{0}`")]
    DuplicateId(String),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("prompt `{0}` is unreviewed and cannot enter a plan")]
    Unreviewed(String),

    #[error("augmentation service unavailable: {0}")]
    ServiceUnavailable(String),

    #[error("malformed augmentation response: {0}")]
    MalformedResponse(String),

    #[error("feature extractor error: {0}")]
    Extractor(String),

    #[error("manifest integrity error: {0}")]
    Integrity(String),

    #[error("invalid rep file: {0}")]
    RepFormat(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {0}")]
    IoMessage(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable error code, printed by the CLI as `error[E_...]`.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownCondition(_) => "E_UNKNOWN_CONDITION",
            Self::NoPadsAvailable(_) => "E_NO_PADS",
            Self::NoEos => "E_NO_EOS",
            Self::ShapeMismatch(_) => "E_SHAPE_MISMATCH",
            Self::EncoderMismatch { .. } => "E_ENCODER_MISMATCH",
            Self::LayerMismatch { .. } => "E_LAYER_MISMATCH",
            Self::LengthMismatch { .. } => "E_LENGTH_MISMATCH",
            Self::DimensionMismatch(_) => "E_DIMENSION_MISMATCH",
            Self::NotNormalized(_) => "E_NOT_NORMALIZED",
            Self::TooFewSamples(_) => "E_TOO_FEW_SAMPLES",
            Self::EmptyInput(_) => "E_EMPTY_INPUT",
            Self::LabelMismatch(_) => "E_LABEL_MISMATCH",
            Self::GridMismatch(_) => "E_GRID_MISMATCH",
            Self::UnsupportedPlan(_) => "E_UNSUPPORTED_PLAN",
            Self::UnsupportedCapability(_) => "E_UNSUPPORTED_CAPABILITY",
            Self::UnsupportedCapture(_) => "E_UNSUPPORTED_CAPTURE",
            Self::Backend(_) => "E_BACKEND",
            Self::InvalidConfig(_) => "E_INVALID_CONFIG",
            Self::InvalidPrompt(_) => "E_INVALID_PROMPT",
            Self::Parse(_) => "E_PARSE",
            Self::DuplicateId(_) => "E_DUPLICATE_ID",
            Self::UnknownCategory(_) => "E_UNKNOWN_CATEGORY",
            Self::Unreviewed(_) => "E_UNREVIEWED",
            Self::ServiceUnavailable(_) => "E_SERVICE_UNAVAILABLE",
            Self::MalformedResponse(_) => "E_MALFORMED_RESPONSE",
            Self::Extractor(_) => "E_EXTRACTOR",
            Self::Integrity(_) => "E_INTEGRITY",
            Self::RepFormat(_) => "E_REP_FORMAT",
            Self::Io { .. } | Self::IoMessage(_) => "E_IO",
            Self::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
