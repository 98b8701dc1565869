// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the engine.

use std::path::PathBuf;

/// Errors produced by the unlearning engine.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum TrusError {
    /// A vector whose squared norm is below the degeneracy threshold.
    #[error("degenerate vector: squared norm {0:e} below threshold")]
    DegenerateVector(f64),

    /// A frame matrix with no rows.
    #[error("empty frame matrix")]
    EmptyMatrix,

    /// The opt-out activation coincides with the prototype; no direction exists.
    #[error("degenerate steering direction: activation equals the prototype")]
    DegenerateDirection,

    /// Incompatible dimensions between two operands.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Steering strength outside its valid range.
    #[error("invalid steering strength {0}")]
    InvalidStrength(f64),

    /// Steering direction is not unit-norm.
    #[error("steering direction is not unit norm (norm {0})")]
    NonUnitDirection(f64),

    /// A value that is NaN or infinite.
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    /// Writing to the destination failed.
    #[error("sink failure: {0}")]
    SinkFailure(#[source] std::io::Error),

    #[error("duplicate speaker '{0}'")]
    DuplicateSpeaker(String),

    #[error("empty speaker pool")]
    EmptyPool,

    /// Metadata that contradicts an invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A sidecar or index file that should exist next to a data file.
    #[error("missing metadata file {}", .0.display())]
    MissingMetadata(PathBuf),

    /// Evaluation harness misconfiguration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrusError>;
