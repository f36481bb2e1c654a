//! Desk-scale spatiotemporal bird's-eye-view encoder.
//!
//! The crate turns multi-camera images into a unified BEV feature grid via
//! grid-shaped queries, pillar-projected spatial cross-attention and
//! recurrent temporal self-attention, with hand-written forward and backward
//! kernels throughout. A synthetic scene generator with exact ground truth,
//! an AdamW training loop, evaluation metrics and a CLI driver round out the
//! stack.

pub mod attention;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod geometry;
pub mod io;
pub mod learner;
pub mod metrics;
pub mod scene;
pub mod tensor;

pub use tensor::{FeatureMap, Tensor};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
