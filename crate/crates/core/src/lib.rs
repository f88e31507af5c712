//! Iris segmentation toolkit: a U-shaped windowed-attention network with
//! convolutional projections, a cross-attention decoder, dense pixel-shuffle
//! resampling and uncertainty-weighted training, built on a self-contained
//! f64 reverse-mode autodiff engine. Everything runs deterministically on
//! CPU at desk scale against synthetic data.

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod viz;

pub use tensor::{Tape, Tensor, TensorId};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] train::CheckpointError),
    #[error("distribution violation: {0}")]
    Distribution(String),
    #[error("uncertainty map must be detached before weighting losses")]
    UndetachedMap,
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
