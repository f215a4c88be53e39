//! MATPOWER-style case files.
//!
//! Grammar (one statement per line, `%` starts a comment):
//!
//! ```text
//! function mpc = <name>            optional
//! mpc.version = '2';               optional
//! mpc.baseMVA = <number>;
//! mpc.bus = [ <row>; ... ];        13 columns
//! mpc.gen = [ <row>; ... ];        first 10 columns used
//! mpc.branch = [ <row>; ... ];     11 or 13 columns
//! ```
//!
//! Each table row sits on its own line; numbers are separated by blanks or
//! tabs and the trailing `;` is optional. Other `mpc.<name> = [ ... ];` or
//! `{ ... };` blocks are skipped. Units follow MATPOWER: loads and shunts in
//! MW/MVAr, impedances in p.u. on `baseMVA`, angles in degrees.

use std::collections::{HashMap, VecDeque};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GridError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusType {
    Pq,
    Pv,
    Slack,
}

impl BusType {
    fn code(self) -> u8 {
        match self {
            BusType::Pq => 1,
            BusType::Pv => 2,
            BusType::Slack => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub kind: BusType,
    /// Active load (MW).
    pub pd: f64,
    /// Reactive load (MVAr).
    pub qd: f64,
    /// Shunt conductance (MW at 1 p.u.).
    pub gs: f64,
    /// Shunt susceptance (MVAr at 1 p.u.).
    pub bs: f64,
    pub area: u32,
    pub vm: f64,
    pub va_deg: f64,
    pub base_kv: f64,
    pub zone: u32,
    pub vmax: f64,
    pub vmin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: u32,
    pub pg: f64,
    pub qg: f64,
    pub qmax: f64,
    pub qmin: f64,
    /// Voltage magnitude setpoint (p.u.).
    pub vg: f64,
    pub mbase: f64,
    pub in_service: bool,
    pub pmax: f64,
    pub pmin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance (p.u.).
    pub b: f64,
    pub rate_a: f64,
    pub rate_b: f64,
    pub rate_c: f64,
    /// Off-nominal tap ratio; 0 means a plain line.
    pub ratio: f64,
    pub shift_deg: f64,
    pub in_service: bool,
    pub angmin: f64,
    pub angmax: f64,
}

impl Branch {
    /// Effective tap (1 for lines).
    pub fn tap(&self) -> f64 {
        if self.ratio == 0.0 {
            1.0
        } else {
            self.ratio
        }
    }
}

/// A validated power-grid case.
#[derive(Clone, Debug, PartialEq)]
pub struct GridGraph {
    name: String,
    base_mva: f64,
    buses: Vec<Bus>,
    generators: Vec<Generator>,
    branches: Vec<Branch>,
    index: HashMap<u32, usize>,
    slack: usize,
}

/// Source line numbers of table rows, used for diagnostics.
#[derive(Default)]
struct Lines {
    bus: Vec<usize>,
    branch: Vec<usize>,
    gen: Vec<usize>,
}

impl GridGraph {
    /// Builds and validates a grid from its tables.
    pub fn new(
        name: impl Into<String>,
        base_mva: f64,
        buses: Vec<Bus>,
        generators: Vec<Generator>,
        branches: Vec<Branch>,
    ) -> Result<Self, GridError> {
        Self::validated(name.into(), base_mva, buses, generators, branches, &Lines::default())
    }

    fn validated(
        name: String,
        base_mva: f64,
        buses: Vec<Bus>,
        generators: Vec<Generator>,
        branches: Vec<Branch>,
        lines: &Lines,
    ) -> Result<Self, GridError> {
        let line = |v: &Vec<usize>, i: usize| v.get(i).copied();
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(GridError::Malformed {
                line: None,
                reason: format!("baseMVA must be positive, got {base_mva}"),
            });
        }
        if buses.is_empty() {
            return Err(GridError::Malformed {
                line: None,
                reason: "bus table is empty".into(),
            });
        }
        let mut index = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(GridError::DuplicateBus {
                    line: line(&lines.bus, i),
                    id: b.id,
                });
            }
        }
        for (i, g) in generators.iter().enumerate() {
            if !index.contains_key(&g.bus) {
                return Err(GridError::DanglingEndpoint {
                    line: line(&lines.gen, i),
                    bus: g.bus,
                });
            }
        }
        for (i, br) in branches.iter().enumerate() {
            for end in [br.from, br.to] {
                if !index.contains_key(&end) {
                    return Err(GridError::DanglingEndpoint {
                        line: line(&lines.branch, i),
                        bus: end,
                    });
                }
            }
            if br.from == br.to {
                return Err(GridError::Malformed {
                    line: line(&lines.branch, i),
                    reason: format!("branch {i} connects bus {} to itself", br.from),
                });
            }
            if br.in_service && br.r == 0.0 && br.x == 0.0 {
                return Err(GridError::ZeroImpedance {
                    line: line(&lines.branch, i),
                    branch: i,
                });
            }
        }
        let slacks: Vec<usize> = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusType::Slack)
            .map(|(i, _)| i)
            .collect();
        if slacks.len() != 1 {
            return Err(GridError::SlackCount(slacks.len()));
        }
        let g = Self {
            name,
            base_mva,
            buses,
            generators,
            branches,
            index,
            slack: slacks[0],
        };
        let unreached = g.unreachable_buses();
        if !unreached.is_empty() {
            return Err(GridError::Disconnected(unreached));
        }
        Ok(g)
    }

    /// Ids of buses not reachable from the slack over in-service branches.
    pub(crate) fn unreachable_buses(&self) -> Vec<u32> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in self.branches.iter().filter(|b| b.in_service) {
            let (f, t) = (self.index[&br.from], self.index[&br.to]);
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.slack]);
        seen[self.slack] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        (0..n).filter(|&i| !seen[i]).map(|i| self.buses[i].id).collect()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn generators(&self) -> &[Generator] {
        &self.generators
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Position of the slack bus.
    pub fn slack(&self) -> usize {
        self.slack
    }

    /// Position of bus `id` in [`buses`](Self::buses).
    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Positions of the two endpoints of branch `k`.
    pub fn endpoints(&self, k: usize) -> (usize, usize) {
        let br = &self.branches[k];
        (self.index[&br.from], self.index[&br.to])
    }

    /// First branch joining buses `a` and `b` (either orientation), preferring
    /// in-service ones.
    pub fn find_branch(&self, a: u32, b: u32) -> Option<usize> {
        let matches = |br: &Branch| (br.from == a && br.to == b) || (br.from == b && br.to == a);
        self.branches
            .iter()
            .position(|br| br.in_service && matches(br))
            .or_else(|| self.branches.iter().position(matches))
    }

    /// Resolves `from-to` (bus ids) or `#k` (0-based branch index).
    pub fn parse_branch_ref(&self, s: &str) -> Result<usize, GridError> {
        let s = s.trim();
        let unknown = || GridError::UnknownBranch(s.to_string());
        if let Some(k) = s.strip_prefix('#') {
            let k: usize = k.parse().map_err(|_| unknown())?;
            return if k < self.branches.len() { Ok(k) } else { Err(unknown()) };
        }
        let (a, b) = s.split_once('-').ok_or_else(unknown)?;
        let a: u32 = a.trim().parse().map_err(|_| unknown())?;
        let b: u32 = b.trim().parse().map_err(|_| unknown())?;
        self.find_branch(a, b).ok_or_else(unknown)
    }

    /// `from-to` label of branch `k`.
    pub fn branch_label(&self, k: usize) -> String {
        let br = &self.branches[k];
        format!("{}-{}", br.from, br.to)
    }

    /// Buses at the highest base voltage.
    pub fn highest_voltage_buses(&self) -> Vec<u32> {
        let top = self.buses.iter().map(|b| b.base_kv).fold(f64::NEG_INFINITY, f64::max);
        self.buses.iter().filter(|b| b.base_kv == top).map(|b| b.id).collect()
    }

    /// Copy with every load scaled by `k`.
    pub fn with_scaled_loads(&self, k: f64) -> Self {
        let mut g = self.clone();
        for b in &mut g.buses {
            b.pd *= k;
            b.qd *= k;
        }
        g
    }

    /// Copy with active/reactive loads replaced (MW / MVAr, bus order).
    pub fn with_loads(&self, pd: &[f64], qd: &[f64]) -> Self {
        let mut g = self.clone();
        for (b, (p, q)) in g.buses.iter_mut().zip(pd.iter().zip(qd)) {
            b.pd = *p;
            b.qd = *q;
        }
        g
    }

    /// Copy with in-service generator active outputs replaced (MW).
    pub fn with_generation(&self, pg: &[f64]) -> Self {
        let mut g = self.clone();
        for (gen, p) in g.generators.iter_mut().zip(pg) {
            gen.pg = *p;
        }
        g
    }

    pub(crate) fn branches_mut(&mut self) -> &mut [Branch] {
        &mut self.branches
    }

    /// SHA-256 (hex) of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_case_string().as_bytes()))
    }

    /// Canonical case text; [`parse_case`] reproduces the same grid.
    pub fn to_case_string(&self) -> String {
        serialize_case(self)
    }
}

/// Parses case text (see module docs for the grammar).
pub fn parse_case(text: &str) -> Result<GridGraph, GridError> {
    let mut name = String::from("case");
    let mut base_mva = None;
    let mut lines = Lines::default();
    let mut buses = Vec::new();
    let mut gens = Vec::new();
    let mut branches = Vec::new();

    enum Block {
        None,
        Bus,
        Gen,
        Branch,
        Skip(&'static str),
    }
    let mut block = Block::None;

    for (k, raw) in text.lines().enumerate() {
        let lineno = k + 1;
        let line = raw.split('%').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match block {
            Block::Skip(close) => {
                if line.starts_with(close) {
                    block = Block::None;
                }
                continue;
            }
            Block::Bus | Block::Gen | Block::Branch => {
                if line.starts_with("];") || line == "]" {
                    block = Block::None;
                    continue;
                }
                let values = parse_row(line, lineno)?;
                match block {
                    Block::Bus => {
                        buses.push(bus_from_row(&values, lineno)?);
                        lines.bus.push(lineno);
                    }
                    Block::Gen => {
                        gens.push(gen_from_row(&values, lineno)?);
                        lines.gen.push(lineno);
                    }
                    _ => {
                        branches.push(branch_from_row(&values, lineno)?);
                        lines.branch.push(lineno);
                    }
                }
                continue;
            }
            Block::None => {}
        }
        if let Some(rest) = line.strip_prefix("function") {
            if let Some((_, n)) = rest.split_once('=') {
                name = n.trim().trim_end_matches(';').to_string();
            }
            continue;
        }
        let Some((lhs, rhs)) = line.split_once('=') else {
            return Err(malformed(lineno, format!("unexpected statement `{line}`")));
        };
        let lhs = lhs.trim();
        let rhs = rhs.trim();
        match lhs {
            "mpc.baseMVA" => {
                let v = rhs.trim_end_matches(';').trim();
                base_mva = Some(
                    v.parse::<f64>()
                        .map_err(|_| malformed(lineno, format!("bad baseMVA `{v}`")))?,
                );
            }
            "mpc.version" => {}
            "mpc.bus" | "mpc.gen" | "mpc.branch" => {
                if rhs != "[" {
                    return Err(malformed(lineno, format!("expected `[` after {lhs}")));
                }
                block = match lhs {
                    "mpc.bus" => Block::Bus,
                    "mpc.gen" => Block::Gen,
                    _ => Block::Branch,
                };
            }
            _ if lhs.starts_with("mpc.") => {
                if rhs.starts_with('[') && !rhs.contains(']') {
                    block = Block::Skip("]");
                } else if rhs.starts_with('{') && !rhs.contains('}') {
                    block = Block::Skip("}");
                }
            }
            _ => return Err(malformed(lineno, format!("unexpected statement `{line}`"))),
        }
    }
    if !matches!(block, Block::None) {
        return Err(malformed(text.lines().count(), "unterminated table".into()));
    }
    let base_mva = base_mva.ok_or_else(|| GridError::Malformed {
        line: None,
        reason: "missing mpc.baseMVA".into(),
    })?;
    GridGraph::validated(name, base_mva, buses, gens, branches, &lines)
}

fn malformed(line: usize, reason: String) -> GridError {
    GridError::Malformed {
        line: Some(line),
        reason,
    }
}

fn parse_row(line: &str, lineno: usize) -> Result<Vec<f64>, GridError> {
    let body = line.trim_end_matches(';').trim();
    if body.contains(';') {
        return Err(malformed(lineno, "one table row per line expected".into()));
    }
    body.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(lineno, format!("bad number `{tok}`")))
        })
        .collect()
}

fn need(values: &[f64], n: usize, table: &str, lineno: usize) -> Result<(), GridError> {
    if values.len() < n {
        return Err(malformed(
            lineno,
            format!("{table} row has {} columns, expected at least {n}", values.len()),
        ));
    }
    Ok(())
}

fn as_id(v: f64, what: &str, lineno: usize) -> Result<u32, GridError> {
    if v.fract() == 0.0 && v >= 0.0 && v <= u32::MAX as f64 {
        Ok(v as u32)
    } else {
        Err(malformed(lineno, format!("{what} must be a non-negative integer, got {v}")))
    }
}

fn bus_from_row(v: &[f64], lineno: usize) -> Result<Bus, GridError> {
    need(v, 13, "bus", lineno)?;
    let kind = match as_id(v[1], "bus type", lineno)? {
        1 => BusType::Pq,
        2 => BusType::Pv,
        3 => BusType::Slack,
        t => return Err(malformed(lineno, format!("unsupported bus type {t}"))),
    };
    Ok(Bus {
        id: as_id(v[0], "bus id", lineno)?,
        kind,
        pd: v[2],
        qd: v[3],
        gs: v[4],
        bs: v[5],
        area: as_id(v[6], "area", lineno)?,
        vm: v[7],
        va_deg: v[8],
        base_kv: v[9],
        zone: as_id(v[10], "zone", lineno)?,
        vmax: v[11],
        vmin: v[12],
    })
}

fn gen_from_row(v: &[f64], lineno: usize) -> Result<Generator, GridError> {
    need(v, 10, "gen", lineno)?;
    Ok(Generator {
        bus: as_id(v[0], "generator bus", lineno)?,
        pg: v[1],
        qg: v[2],
        qmax: v[3],
        qmin: v[4],
        vg: v[5],
        mbase: v[6],
        in_service: v[7] > 0.0,
        pmax: v[8],
        pmin: v[9],
    })
}

fn branch_from_row(v: &[f64], lineno: usize) -> Result<Branch, GridError> {
    need(v, 11, "branch", lineno)?;
    Ok(Branch {
        from: as_id(v[0], "branch endpoint", lineno)?,
        to: as_id(v[1], "branch endpoint", lineno)?,
        r: v[2],
        x: v[3],
        b: v[4],
        rate_a: v[5],
        rate_b: v[6],
        rate_c: v[7],
        ratio: v[8],
        shift_deg: v[9],
        in_service: v[10] > 0.0,
        angmin: v.get(11).copied().unwrap_or(-360.0),
        angmax: v.get(12).copied().unwrap_or(360.0),
    })
}

struct Row<'a>(&'a [f64]);

impl fmt::Display for Row<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in self.0 {
            // `{}` on f64 prints the shortest text that parses back exactly.
            write!(f, "\t{v}")?;
        }
        f.write_str(";")
    }
}

/// Writes the canonical case text.
pub fn serialize_case(g: &GridGraph) -> String {
    let mut s = String::new();
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    writeln!(s, "function mpc = {}", g.name).unwrap();
    writeln!(s, "mpc.version = '2';").unwrap();
    writeln!(s, "mpc.baseMVA = {};", g.base_mva).unwrap();
    writeln!(s).unwrap();
    writeln!(s, "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin").unwrap();
    writeln!(s, "mpc.bus = [").unwrap();
    for b in &g.buses {
        let row = [
            b.id as f64,
            b.kind.code() as f64,
            b.pd,
            b.qd,
            b.gs,
            b.bs,
            b.area as f64,
            b.vm,
            b.va_deg,
            b.base_kv,
            b.zone as f64,
            b.vmax,
            b.vmin,
        ];
        writeln!(s, "{}", Row(&row)).unwrap();
    }
    writeln!(s, "];").unwrap();
    writeln!(s).unwrap();
    writeln!(s, "%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin").unwrap();
    writeln!(s, "mpc.gen = [").unwrap();
    for gen in &g.generators {
        let row = [
            gen.bus as f64,
            gen.pg,
            gen.qg,
            gen.qmax,
            gen.qmin,
            gen.vg,
            gen.mbase,
            flag(gen.in_service),
            gen.pmax,
            gen.pmin,
        ];
        writeln!(s, "{}", Row(&row)).unwrap();
    }
    writeln!(s, "];").unwrap();
    writeln!(s).unwrap();
    writeln!(s, "%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax").unwrap();
    writeln!(s, "mpc.branch = [").unwrap();
    for br in &g.branches {
        let row = [
            br.from as f64,
            br.to as f64,
            br.r,
            br.x,
            br.b,
            br.rate_a,
            br.rate_b,
            br.rate_c,
            br.ratio,
            br.shift_deg,
            flag(br.in_service),
            br.angmin,
            br.angmax,
        ];
        writeln!(s, "{}", Row(&row)).unwrap();
    }
    writeln!(s, "];").unwrap();
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::cases;

    #[test]
    fn bundled_case_counts() {
        let g14 = parse_case(cases::IEEE14).unwrap();
        assert_eq!((g14.bus_count(), g14.branches().len()), (14, 20));
        let g30 = parse_case(cases::IEEE30).unwrap();
        assert_eq!((g30.bus_count(), g30.branches().len()), (30, 41));
        let g118 = parse_case(cases::IEEE118).unwrap();
        assert_eq!((g118.bus_count(), g118.branches().len()), (118, 186));
        assert_eq!(g118.generators().len(), 54);
        assert_eq!(g14.buses()[g14.slack()].id, 1);
    }

    #[test]
    fn round_trip_is_byte_stable() {
        for text in [cases::IEEE14, cases::IEEE30, cases::IEEE118] {
            let g = parse_case(text).unwrap();
            let s1 = serialize_case(&g);
            let g2 = parse_case(&s1).unwrap();
            assert_eq!(g, g2);
            assert_eq!(s1, serialize_case(&g2));
            assert_eq!(g.hash(), g2.hash());
        }
    }

    const TWO_BUS: &str = "mpc.baseMVA = 100;
mpc.bus = [
 1 3 0 0 0 0 1 1 0 0 1 1.1 0.9;
 2 1 10 0 0 0 1 1 0 0 1 1.1 0.9;
];
mpc.gen = [
 1 0 0 100 -100 1 100 1 100 0;
];
mpc.branch = [
 1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
";

    #[test]
    fn parses_minimal_case() {
        let g = parse_case(TWO_BUS).unwrap();
        assert_eq!(g.bus_count(), 2);
        assert_eq!(g.branches()[0].x, 0.1);
    }

    #[test]
    fn empty_branch_table_is_disconnected() {
        let text = TWO_BUS.replace(" 1 2 0 0.1 0 0 0 0 0 0 1 -360 360;\n", "");
        assert_eq!(parse_case(&text), Err(GridError::Disconnected(vec![2])));
    }

    #[test]
    fn dangling_endpoint_has_line_number() {
        let text = TWO_BUS.replace(" 1 2 0 0.1", " 1 99 0 0.1");
        assert_eq!(
            parse_case(&text),
            Err(GridError::DanglingEndpoint {
                line: Some(10),
                bus: 99
            })
        );
    }

    #[test]
    fn duplicate_bus_detected() {
        let text = TWO_BUS.replace(" 2 1 10", " 1 1 10");
        assert_eq!(
            parse_case(&text),
            Err(GridError::DuplicateBus {
                line: Some(4),
                id: 1
            })
        );
    }

    #[test]
    fn zero_impedance_detected() {
        let text = TWO_BUS.replace("0 0.1 0 0 0 0 0 0 1", "0 0 0 0 0 0 0 0 1");
        assert_eq!(
            parse_case(&text),
            Err(GridError::ZeroImpedance {
                line: Some(10),
                branch: 0
            })
        );
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = TWO_BUS.replace(" 2 1 10 0", " 2 1 ten 0");
        match parse_case(&text) {
            Err(GridError::Malformed { line: Some(4), .. }) => {}
            other => panic!("{other:?}"),
        }
        let short = TWO_BUS.replace(" 1 1 0 0 1 1.1 0.9;\n];", " 1;\n];");
        assert!(matches!(parse_case(&short), Err(GridError::Malformed { .. })));
    }

    #[test]
    fn branch_references() {
        let g = parse_case(cases::IEEE118).unwrap();
        let k = g.parse_branch_ref("8-5").unwrap();
        assert_eq!(g.parse_branch_ref("5-8").unwrap(), k);
        assert_eq!(g.parse_branch_ref(&format!("#{k}")).unwrap(), k);
        assert!(g.parse_branch_ref("1-118").is_err());
        assert_eq!(g.highest_voltage_buses().len(), 11);
    }
}
