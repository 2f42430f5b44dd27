//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("OBJ parse error at line {line}: {msg}")]
    ObjParse { line: usize, msg: String },

    #[error("mesh is empty")]
    EmptyMesh,

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("coordinate {value} outside [-0.5, 0.5] (tolerance 1e-6)")]
    CoordinateOutOfRange { value: f64 },

    #[error("malformed token sequence: {0}")]
    Framing(String),

    #[error("token {token} rejected at position {position} (lower bound {lower_bound})")]
    TokenRejected {
        position: u64,
        token: u16,
        lower_bound: u32,
    },

    #[error("degenerate sampling distribution: no valid token has finite probability")]
    DegenerateDistribution,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("PLY format error: {0}")]
    Ply(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
