//! Minimal dense neural-network substrate.
//!
//! Everything the path-scoring networks need and nothing more: named
//! parameter groups, MLP forward/backward via explicit tapes, stable
//! scalar links (softplus, log1mexp), Adam, checkpoint IO, and a
//! finite-difference gradient checker. All arithmetic is f64.

mod adam;
mod checkpoint;
mod gradcheck;
mod mlp;
mod params;
mod scalar;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, model_id, parse_checkpoint, save_checkpoint};
pub use gradcheck::grad_check;
pub use mlp::{mlp_backward, mlp_forward, register_mlp, Activation, MlpSpec, MlpTape};
pub use params::{Param, ParamStore};
pub use scalar::{leaky_relu, leaky_relu_grad, log1mexp, softplus, softplus_grad};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch at {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("parameter group `{0}` already registered")]
    DuplicateGroup(String),
    #[error("tape for `{0}` already consumed by a backward pass")]
    StaleTape(String),
    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid MLP spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint corrupt: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
