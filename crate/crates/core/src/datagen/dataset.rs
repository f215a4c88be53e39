//! Snapshot datasets and their binary container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "CGNNSEDS"
//! offset 8   u64       header length H
//! offset 16  H bytes   header, UTF-8 JSON (DatasetHeader)
//! then       f64 × count·N·2   true states (vm p.u., va rad), snapshot-major
//! then       f64 × count·P·2   PMU measurements, PMU order of the header
//! then       f64 × count·N     active load per bus (MW)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::noise::NoiseModel;
use super::DataError;
use crate::grid::GridGraph;
use crate::numerics::Matrix;

pub const DATASET_MAGIC: &[u8; 8] = b"CGNNSEDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub grid_hash: String,
    pub grid_name: String,
    pub bus_count: usize,
    /// PMU bus ids, in measurement order.
    pub pmu_buses: Vec<u32>,
    /// Positions of the PMU buses in the grid's bus order.
    pub pmu_positions: Vec<usize>,
    pub noise: NoiseModel,
    pub seed: u64,
    pub count: usize,
    /// Suggested mixture component count for training.
    pub components: usize,
}

/// Solved operating conditions with PMU measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotDataset {
    pub header: DatasetHeader,
    truth: Vec<f64>,
    measured: Vec<f64>,
    loads: Vec<f64>,
}

impl SnapshotDataset {
    pub fn new(
        header: DatasetHeader,
        truth: Vec<f64>,
        measured: Vec<f64>,
        loads: Vec<f64>,
    ) -> Result<Self, DataError> {
        let (c, n, p) = (header.count, header.bus_count, header.pmu_positions.len());
        if truth.len() != c * n * 2 || measured.len() != c * p * 2 || loads.len() != c * n {
            return Err(DataError::Invalid("dataset block sizes disagree with header".into()));
        }
        if header.pmu_buses.len() != p || header.pmu_positions.iter().any(|&i| i >= n) {
            return Err(DataError::Invalid("PMU positions out of range".into()));
        }
        if truth.iter().chain(&measured).chain(&loads).any(|x| !x.is_finite()) {
            return Err(DataError::Invalid("dataset contains non-finite values".into()));
        }
        Ok(Self {
            header,
            truth,
            measured,
            loads,
        })
    }

    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn bus_count(&self) -> usize {
        self.header.bus_count
    }

    pub fn pmu_positions(&self) -> &[usize] {
        &self.header.pmu_positions
    }

    /// True at PMU buses.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.bus_count()];
        for &i in &self.header.pmu_positions {
            m[i] = true;
        }
        m
    }

    /// `N × 2` true state of snapshot `s`.
    pub fn truth(&self, s: usize) -> Matrix {
        let n = self.bus_count();
        Matrix::from_vec(n, 2, self.truth[s * n * 2..(s + 1) * n * 2].to_vec()).expect("finite")
    }

    /// `P × 2` measurements of snapshot `s`.
    pub fn measured(&self, s: usize) -> Matrix {
        let p = self.header.pmu_positions.len();
        Matrix::from_vec(p, 2, self.measured[s * p * 2..(s + 1) * p * 2].to_vec()).expect("finite")
    }

    /// `N × 2` feature matrix with measurements at PMU rows and zeros
    /// elsewhere.
    pub fn observed(&self, s: usize) -> Matrix {
        scatter_rows(&self.measured(s), &self.header.pmu_positions, self.bus_count())
    }

    /// Active loads (MW) of snapshot `s`.
    pub fn loads(&self, s: usize) -> &[f64] {
        let n = self.bus_count();
        &self.loads[s * n..(s + 1) * n]
    }

    /// Dataset restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let (n, p) = (self.bus_count(), self.header.pmu_positions.len());
        let mut truth = Vec::with_capacity(indices.len() * n * 2);
        let mut measured = Vec::with_capacity(indices.len() * p * 2);
        let mut loads = Vec::with_capacity(indices.len() * n);
        for &s in indices {
            truth.extend_from_slice(&self.truth[s * n * 2..(s + 1) * n * 2]);
            measured.extend_from_slice(&self.measured[s * p * 2..(s + 1) * p * 2]);
            loads.extend_from_slice(self.loads(s));
        }
        let mut header = self.header.clone();
        header.count = indices.len();
        Self {
            header,
            truth,
            measured,
            loads,
        }
    }

    /// Replaces the measurements of every snapshot.
    pub fn with_measurements(&self, measured: Vec<f64>, noise: NoiseModel) -> Result<Self, DataError> {
        let mut header = self.header.clone();
        header.noise = noise;
        Self::new(header, self.truth.clone(), measured, self.loads.clone())
    }

    pub fn check_grid(&self, g: &GridGraph) -> Result<(), DataError> {
        let hash = g.hash();
        if hash != self.header.grid_hash {
            return Err(DataError::HashMismatch {
                file: self.header.grid_hash.clone(),
                grid: hash,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let floats = self.truth.len() + self.measured.len() + self.loads.len();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * floats);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.truth.iter().chain(&self.measured).chain(&self.loads) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != DATASET_MAGIC {
            return Err(DataError::Format {
                offset: 0,
                reason: "not a dataset file (bad magic)".into(),
            });
        }
        let len = u64::from_le_bytes(r.take(8, "header length")?.try_into().unwrap()) as usize;
        let at = r.pos;
        let header: DatasetHeader =
            serde_json::from_slice(r.take(len, "header")?).map_err(|e| DataError::Format {
                offset: at,
                reason: format!("bad header: {e}"),
            })?;
        if header.format_version != DATASET_VERSION {
            return Err(DataError::VersionMismatch {
                found: header.format_version,
                expected: DATASET_VERSION,
            });
        }
        let (c, n, p) = (header.count, header.bus_count, header.pmu_positions.len());
        let truth = r.floats(c * n * 2, "true states")?;
        let measured = r.floats(c * p * 2, "measurements")?;
        let loads = r.floats(c * n, "loads")?;
        if r.pos != bytes.len() {
            return Err(DataError::Format {
                offset: r.pos,
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Self::new(header, truth, measured, loads)
    }
}

/// Places the rows of `values` at `positions` of an `n`-row zero matrix.
pub fn scatter_rows(values: &Matrix, positions: &[usize], n: usize) -> Matrix {
    let mut out = Matrix::zeros(n, values.cols());
    for (k, &i) in positions.iter().enumerate() {
        out.row_mut(i).copy_from_slice(values.row(k));
    }
    out
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(DataError::Format {
                offset: self.pos,
                reason: format!(
                    "truncated {what}: need {len} bytes, {} available",
                    self.bytes.len() - self.pos
                ),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn floats(&mut self, count: usize, what: &str) -> Result<Vec<f64>, DataError> {
        let raw = self.take(count.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn write_dataset(path: &Path, ds: &SnapshotDataset) -> Result<(), DataError> {
    std::fs::write(path, ds.to_bytes()).map_err(|e| DataError::io(path, e))
}

/// Reads a dataset; with `grid`, also checks the recorded grid hash.
pub fn read_dataset(path: &Path, grid: Option<&GridGraph>) -> Result<SnapshotDataset, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let ds = SnapshotDataset::from_bytes(&bytes)?;
    if let Some(g) = grid {
        ds.check_grid(g)?;
    }
    Ok(ds)
}
