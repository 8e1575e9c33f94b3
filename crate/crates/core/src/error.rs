use thiserror::Error;

use crate::frame::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("unknown verb `{0}`")]
    UnknownVerb(String),

    #[error("unknown noun `{0}`")]
    UnknownNoun(String),

    /// A record in an annotation or prediction file could not be accepted.
    #[error("line {line}: image `{image_id}`: field `{field}`: {message}")]
    Record {
        line: usize,
        image_id: String,
        field: String,
        message: String,
    },

    #[error("image `{image_id}` failed validation: {report}")]
    InvalidFrame {
        image_id: String,
        report: ValidationReport,
    },

    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),

    #[error("missing predictions for {} image(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("expected {expected} worker boxes, got {got}")]
    WorkerCount { expected: usize, got: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("verb `{verb}` has {have} images, needs {need}")]
    UndersizedVerb {
        verb: String,
        have: usize,
        need: usize,
    },

    #[error("no features for image `{0}`")]
    MissingFeature(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed embedding file: {0}")]
    EmbeddingFormat(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
