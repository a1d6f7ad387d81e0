use crate::analysis::{CheckpointError, ConfigError};
use crate::data::DataError;
use crate::tensor::TensorError;

/// Crate-wide error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid specification: {0}")]
    Spec(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("non-finite loss term: {0}")]
    NonFiniteTerm(String),
    #[error("model has no auxiliator; confidence maps are unavailable")]
    NoAuxiliator,
}

pub type Result<T> = std::result::Result<T, Error>;
