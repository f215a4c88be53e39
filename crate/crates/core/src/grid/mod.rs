//! Grid model: case files, adjacency matrices and topology changes.

mod adjacency;
mod case;

pub use adjacency::{adjacency_distance, build_adjacency, AdjacencyPack};
pub use case::{parse_case, serialize_case, Branch, Bus, BusType, Generator, GridGraph};

use std::fmt;

/// Bundled standard cases.
pub mod cases {
    pub const IEEE14: &str = include_str!("../../data/case14.m");
    pub const IEEE30: &str = include_str!("../../data/case30.m");
    pub const IEEE118: &str = include_str!("../../data/case118.m");

    /// Looks up a bundled case by name (`ieee14`, `case14`, `14`, ...).
    pub fn by_name(name: &str) -> Option<&'static str> {
        let key = name
            .trim()
            .to_ascii_lowercase()
            .trim_start_matches("ieee")
            .trim_start_matches("case")
            .to_string();
        match key.as_str() {
            "14" => Some(IEEE14),
            "30" => Some(IEEE30),
            "118" => Some(IEEE118),
            _ => None,
        }
    }
}

/// Optional source line for diagnostics.
pub struct Loc(pub Option<usize>);

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(l) => write!(f, "line {l}: "),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("{}malformed case: {reason}", Loc(*.line))]
    Malformed { line: Option<usize>, reason: String },
    #[error("{}duplicate bus id {id}", Loc(*.line))]
    DuplicateBus { line: Option<usize>, id: u32 },
    #[error("{}reference to unknown bus {bus}", Loc(*.line))]
    DanglingEndpoint { line: Option<usize>, bus: u32 },
    #[error("{}branch {branch} has zero impedance", Loc(*.line))]
    ZeroImpedance { line: Option<usize>, branch: usize },
    #[error("expected exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("grid is not connected; unreachable buses: {0:?}")]
    Disconnected(Vec<u32>),
    #[error("outage islands buses {0:?}")]
    Islanding(Vec<u32>),
    #[error("unknown branch `{0}`")]
    UnknownBranch(String),
    #[error("adjacency dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

/// Copy of `g` with the listed branches (0-based indices) out of service.
pub fn perturb_topology(g: &GridGraph, outages: &[usize]) -> Result<GridGraph, GridError> {
    let mut g2 = g.clone();
    for &k in outages {
        let br = g2
            .branches_mut()
            .get_mut(k)
            .ok_or_else(|| GridError::UnknownBranch(format!("#{k}")))?;
        br.in_service = false;
    }
    let islanded = g2.unreachable_buses();
    if islanded.is_empty() {
        Ok(g2)
    } else {
        Err(GridError::Islanding(islanded))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHAIN: &str = "mpc.baseMVA = 100;
mpc.bus = [
 1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;
 2 1 10 0 0 0 1 1 0 0 1 1.1 0.9;
 3 1 10 0 0 0 1 1 0 0 1 1.1 0.9;
];
mpc.gen = [
 1 0 0 100 -100 1 100 1 100 0;
];
mpc.branch = [
 1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
 2 3 0 0.1 0 0 0 0 0 0 1 -360 360;
 2 3 0 0.2 0 0 0 0 0 0 1 -360 360;
];
";

    #[test]
    fn leaf_outage_islands() {
        let g = parse_case(CHAIN).unwrap();
        assert_eq!(perturb_topology(&g, &[0]), Err(GridError::Islanding(vec![2, 3])));
    }

    #[test]
    fn parallel_outage_keeps_adjacency() {
        let g = parse_case(CHAIN).unwrap();
        let g2 = perturb_topology(&g, &[2]).unwrap();
        assert_eq!(build_adjacency(&g).a, build_adjacency(&g2).a);
        assert!(g.branches()[2].in_service, "original untouched");
    }

    #[test]
    fn unknown_branch_rejected() {
        let g = parse_case(CHAIN).unwrap();
        assert!(matches!(perturb_topology(&g, &[7]), Err(GridError::UnknownBranch(_))));
    }

    #[test]
    fn case_lookup() {
        assert!(cases::by_name("ieee14").is_some());
        assert!(cases::by_name("case118").is_some());
        assert!(cases::by_name("ieee57").is_none());
    }
}
