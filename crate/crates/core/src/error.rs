//! Crate-wide error type.
//!
//! One enum so the CLI can map variants onto its exit-code contract
//! (usage = 2, missing artifact = 3, numerical failure = 4).

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An index (token id, class target, feature dim, ...) out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Rank-deficient or otherwise degenerate numerical input.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An activation site does not exist in the model.
    #[error("invalid activation site: {0}")]
    Site(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {message}")]
    Divergence { step: usize, message: String },

    /// A world/plan specification is invalid.
    #[error("invalid spec: {0}")]
    Spec(String),

    /// Model-accuracy filtering removed everything.
    #[error("filtering left an empty instance: {0}")]
    EmptyInstance(String),

    /// A pipeline stage input file is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    /// Malformed configuration or serialized artifact.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }
}
