use thiserror::Error;

/// Error type shared across the crate.
///
/// The variants mirror the failure classes of the pipeline: shape and
/// numeric-domain failures from the tensor kernel, configuration and usage
/// mistakes, and data/IO problems from manifests and image files.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to an op's rule.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A value fell outside an op's numeric domain (log of a non-positive
    /// value, zero-norm vector, ...).
    #[error("{op}: numeric domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A component was configured inconsistently (odd positional dim,
    /// indivisible patch grid, lambda ordering, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called incorrectly (backward on a non-scalar, unknown
    /// variant, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid input data (too-short clip, label out of range, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A file did not parse (manifest CSV, PGM/PPM header, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    /// A manifest row or config value failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// Training failed (non-finite gradient, ...).
    #[error("training error: {0}")]
    Train(String),

    /// The evaluation protocol cannot run (single-subject LOSO, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
