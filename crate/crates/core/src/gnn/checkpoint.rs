//! Model checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "CGNNSECK"
//! offset 8   u64       header length H
//! offset 16  H bytes   header, UTF-8 JSON (CheckpointHeader)
//! then       f64 blocks, one per entry of header.params, row-major
//! then       32 bytes  SHA-256 of every preceding byte
//! ```

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Architecture, CgnnModel, Scaling};
use super::ModelError;
use crate::bddc::ChannelStats;
use crate::grid::{parse_case, GridGraph};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CGNNSECK";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub arch: Architecture,
    pub grid_hash: String,
    /// Canonical case text of the training grid.
    pub case: String,
    pub pmu_buses: Vec<u32>,
    pub train_mask: Vec<bool>,
    pub channel_stats: Option<ChannelStats>,
    pub scaling: Scaling,
    pub params: Vec<ParamBlock>,
}

/// A trained model with the context needed to run it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CgnnModel,
    pub grid: GridGraph,
    pub pmu_buses: Vec<u32>,
    pub channel_stats: Option<ChannelStats>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.model;
        let params = model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(name, m)| ParamBlock {
                name,
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect();
        let header = CheckpointHeader {
            schema_version: SCHEMA_VERSION,
            arch: model.arch.clone(),
            grid_hash: self.grid.hash(),
            case: self.grid.to_case_string(),
            pmu_buses: self.pmu_buses.clone(),
            train_mask: model.train_mask.clone(),
            channel_stats: self.channel_stats.clone(),
            scaling: model.scaling.clone(),
            params,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in model.params() {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let fmt = |offset: usize, reason: String| ModelError::Format { offset, reason };
        if bytes.len() < 16 + 32 {
            return Err(fmt(0, format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(ModelError::Integrity("checksum mismatch".into()));
        }
        if &body[..8] != CHECKPOINT_MAGIC {
            return Err(fmt(0, "not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| fmt(8, format!("header length {len} exceeds file")))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[16..end])
            .map_err(|e| fmt(16, format!("bad header: {e}")))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(ModelError::Version {
                found: header.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let grid = parse_case(&header.case)
            .map_err(|e| fmt(16, format!("embedded case: {e}")))?;
        if grid.hash() != header.grid_hash {
            return Err(ModelError::Integrity("embedded case does not match grid hash".into()));
        }
        let shapes = header.arch.param_shapes();
        if shapes.len() != header.params.len() {
            return Err(ModelError::Architecture(format!(
                "{} parameter blocks, architecture needs {}",
                header.params.len(),
                shapes.len()
            )));
        }
        let mut pos = end;
        let mut mats = Vec::with_capacity(shapes.len());
        for (block, &(r, c)) in header.params.iter().zip(&shapes) {
            if (block.rows, block.cols) != (r, c) {
                return Err(ModelError::Architecture(format!(
                    "{} is {}x{}, architecture needs {r}x{c}",
                    block.name, block.rows, block.cols
                )));
            }
            let need = r * c * 8;
            if pos + need > body.len() {
                return Err(fmt(pos, format!("truncated parameter block {}", block.name)));
            }
            let data = body[pos..pos + need]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            mats.push(Matrix::from_vec(r, c, data).map_err(|e| fmt(pos, e.to_string()))?);
            pos += need;
        }
        if pos != body.len() {
            return Err(fmt(pos, format!("{} trailing bytes", body.len() - pos)));
        }
        let model = assemble(header.arch, header.train_mask, header.scaling, mats)?;
        Ok(Self {
            model,
            grid,
            pmu_buses: header.pmu_buses,
            channel_stats: header.channel_stats,
        })
    }
}

/// Rebuilds a model from blocks in [`CgnnModel::params`] order.
fn assemble(
    arch: Architecture,
    mask: Vec<bool>,
    scaling: Scaling,
    mats: Vec<Matrix>,
) -> Result<CgnnModel, ModelError> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = CgnnModel::init(arch, mask, &mut rng)?;
    model.scaling = scaling;
    for (dst, src) in model.params_mut().into_iter().zip(mats) {
        *dst = src;
    }
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: &Path, ck: &Checkpoint) -> Result<(), ModelError> {
    std::fs::write(path, ck.to_bytes()).map_err(|e| ModelError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
