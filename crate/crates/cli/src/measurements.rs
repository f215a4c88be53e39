//! Measurement files: JSON lines, one snapshot per line. A line is either
//! an array of `{"bus": id, "vm_pu": v, "va_deg": a}` records or an object
//! of parallel arrays `{"bus": [..], "vm_pu": [..], "va_deg": [..]}`.
//! A PMU that is absent from a line, or whose values are null, counts as
//! failed for that snapshot. Blank lines are skipped.

use serde::Deserialize;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    bus: u32,
    vm_pu: Option<f64>,
    va_deg: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Columns {
    bus: Vec<u32>,
    vm_pu: Vec<Option<f64>>,
    va_deg: Vec<Option<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Records(Vec<Record>),
    Columns(Columns),
}

/// One snapshot in the checkpoint's PMU order: `(magnitude p.u., angle
/// rad)` or `None` for a failed PMU.
pub type Reading = Vec<Option<(f64, f64)>>;

pub fn parse(text: &str, pmu_buses: &[u32]) -> Result<Vec<Reading>, String> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(line).map_err(|e| format!("line {ln}: {e}"))?;
        let records: Vec<Record> = match parsed {
            Line::Records(r) => r,
            Line::Columns(c) => {
                if c.vm_pu.len() != c.bus.len() || c.va_deg.len() != c.bus.len() {
                    return Err(format!("line {ln}: bus, vm_pu and va_deg lengths differ"));
                }
                c.bus
                    .into_iter()
                    .zip(c.vm_pu)
                    .zip(c.va_deg)
                    .map(|((bus, vm_pu), va_deg)| Record { bus, vm_pu, va_deg })
                    .collect()
            }
        };
        let mut reading: Reading = vec![None; pmu_buses.len()];
        let mut seen = vec![false; pmu_buses.len()];
        for r in records {
            let Some(k) = pmu_buses.iter().position(|&b| b == r.bus) else {
                return Err(format!("line {ln}: bus {} has no PMU in the model (PMU buses {pmu_buses:?})", r.bus));
            };
            if std::mem::replace(&mut seen[k], true) {
                return Err(format!("line {ln}: bus {} appears twice", r.bus));
            }
            reading[k] = match (r.vm_pu, r.va_deg) {
                (Some(v), Some(a)) if v.is_finite() && a.is_finite() => Some((v, a.to_radians())),
                (None, None) => None,
                _ => return Err(format!("line {ln}: bus {} needs both values finite or both null", r.bus)),
            };
        }
        out.push(reading);
    }
    if out.is_empty() {
        return Err("no snapshots in measurement file".into());
    }
    Ok(out)
}
