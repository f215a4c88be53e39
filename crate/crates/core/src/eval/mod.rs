//! Accuracy metrics and study drivers.

pub mod metrics;
pub mod plot;
pub mod studies;

pub use metrics::{metrics, MetricSet};
pub use studies::{
    climatology, corrupt, evaluate, failure_subsets, measure_latency, ranked_outages, run_study,
    screen_dataset, train_model, write_report, StudyConfig, StudyData, StudyKind, StudyReport,
    StudyRow, StudyTable,
};

use crate::bddc::BddcError;
use crate::datagen::DataError;
use crate::gnn::ModelError;
use crate::grid::GridError;
use crate::powerflow::PowerFlowError;
use crate::train::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction is {pred:?}, truth is {truth:?}")]
    Shape {
        pred: (usize, usize),
        truth: (usize, usize),
    },
    #[error("true magnitude is zero at row {row}")]
    ZeroMagnitude { row: usize },
    #[error("study {0} needs a trained model")]
    MissingModel(String),
    #[error("unknown study kind {0:?}")]
    UnknownKind(String),
    #[error("invalid study configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Bddc(#[from] BddcError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl EvalError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
