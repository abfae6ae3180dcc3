//! Cross-modal self-supervised embedding objectives with exact gradients.
//!
//! The crate trains two-stream embeddings from paired data without labels:
//! multi-way matching losses, an angular similarity with learnable scale,
//! and a cross-domain discriminative loss that also separates embeddings
//! within each modality. A synthetic latent-factor world, a toy two-stream
//! encoder with hand-rolled backprop, and verification/retrieval/probe
//! evaluation protocols make full experiments runnable on a desk machine.

pub mod cli;
pub mod encoders;
pub mod eval;
pub mod losses;
pub mod numerics;
pub mod report;
pub mod similarity;
pub mod synthdata;
pub mod trainer;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error, PartialEq)]
pub enum Error {
    /// A reduction was asked of an empty input.
    #[error("empty reduction")]
    EmptyReduction,
    /// Matrix or batch dimensions do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A cosine similarity was requested for a row with (near-)zero norm.
    #[error("degenerate embedding: row {row} has near-zero norm")]
    DegenerateEmbedding { row: usize },
    /// A non-finite value was found where the contract requires finite data.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Configuration file or schema problem.
    #[error("config error: {0}")]
    Config(String),
    /// A computation produced NaN/Inf or otherwise failed numerically.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A backprop tape does not match the current parameters.
    #[error("stale tape: {0}")]
    StaleTape(String),
    /// Filesystem failure (message-only so the error type stays comparable).
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Config(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
