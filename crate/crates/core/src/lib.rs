//! Transformer-based social group activity detection on a small from-scratch
//! autodiff engine: prompted ViT backbone, group/context transformer, heads,
//! matching-based losses, evaluation metrics and a synthetic data generator.

pub mod assignment;
pub mod attention_dump;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod gct;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod tensor_io;
pub mod train;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error(transparent)]
    Feature(#[from] backbone::FeatureError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: std::path::PathBuf, message: String },
}

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 data or I/O, 4 numerical.
    /// (1 is reserved for command-line usage errors.)
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Checkpoint { .. } | Error::Metric(_) => 2,
            Error::Loss(losses::LossError::Config(_)) => 2,
            Error::Data(data::DataError::Config(_)) => 2,
            Error::Numeric(_) => 4,
            Error::Tensor(tensor::TensorError::NonFinite { .. }) => 4,
            Error::Loss(losses::LossError::NonFinite { .. }) => 4,
            Error::Data(_) | Error::Io { .. } | Error::Feature(_) | Error::Tensor(_) | Error::Loss(_) => 3,
        }
    }
}
