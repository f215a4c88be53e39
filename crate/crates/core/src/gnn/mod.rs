//! The estimation network: mixture-aware first layer, optional GCN layers,
//! multi-head attention and a linear head.

pub mod checkpoint;
pub mod layers;
pub mod model;

use std::path::Path;

pub use checkpoint::{load_model, save_model, Checkpoint, CheckpointHeader, SCHEMA_VERSION};
pub use layers::{
    expected_activation, gcn_forward, mhgat_forward, GcnLayer, GmmGcnLayer, LinearHead, MhGatLayer,
};
pub use model::{masked, Architecture, CgnnModel, MidLayer, Scaling, Trace, DEFAULT_SLOPE, INIT_SCALE};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("model has {model} buses, adjacency has {adj}")]
    Adjacency { model: usize, adj: usize },
    #[error("mask has {got} entries, expected {expected}")]
    Mask { expected: usize, got: usize },
    #[error("feature matrix is {rows}x{cols}, not a stack of {buses}-bus snapshots")]
    Rows { rows: usize, cols: usize, buses: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("non-finite prediction at row {row}")]
    NonFinite { row: usize },
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint schema version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ModelError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
