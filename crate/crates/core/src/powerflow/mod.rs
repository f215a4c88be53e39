//! Newton–Raphson AC power flow in polar coordinates.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::grid::{BusType, GridGraph};
use crate::numerics::Matrix;

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 30;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PowerFlowError {
    #[error("branch {0} has zero impedance")]
    ZeroImpedance(usize),
    #[error("power flow did not converge in {iterations} iterations (worst mismatch {mismatch:.3e} p.u. at bus {bus})")]
    NonConvergence {
        iterations: usize,
        mismatch: f64,
        bus: u32,
    },
    #[error("singular Jacobian at iteration {0}")]
    SingularJacobian(usize),
}

/// Bus admittance matrix split into conductance and susceptance parts.
#[derive(Clone, Debug, PartialEq)]
pub struct Ybus {
    pub g: Matrix,
    pub b: Matrix,
}

impl Ybus {
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        Complex64::new(self.g[(i, j)], self.b[(i, j)])
    }
}

/// Terminal admittances `(yff, yft, ytf, ytt)` of an in-service branch.
pub(crate) fn branch_admittances(
    g: &GridGraph,
    k: usize,
) -> Result<(Complex64, Complex64, Complex64, Complex64), PowerFlowError> {
    let br = &g.branches()[k];
    let z = Complex64::new(br.r, br.x);
    if z.norm() == 0.0 {
        return Err(PowerFlowError::ZeroImpedance(k));
    }
    let ys = z.inv();
    let tap = Complex64::from_polar(br.tap(), br.shift_deg.to_radians());
    let ytt = ys + Complex64::new(0.0, br.b / 2.0);
    let yff = ytt / (tap * tap.conj());
    let yft = -ys / tap.conj();
    let ytf = -ys / tap;
    Ok((yff, yft, ytf, ytt))
}

/// Stamps every in-service branch and bus shunt.
pub fn build_ybus(g: &GridGraph) -> Result<Ybus, PowerFlowError> {
    let n = g.bus_count();
    let mut y = vec![Complex64::new(0.0, 0.0); n * n];
    for (k, br) in g.branches().iter().enumerate() {
        if !br.in_service {
            continue;
        }
        let (yff, yft, ytf, ytt) = branch_admittances(g, k)?;
        let (f, t) = g.endpoints(k);
        y[f * n + f] += yff;
        y[f * n + t] += yft;
        y[t * n + f] += ytf;
        y[t * n + t] += ytt;
    }
    for (i, bus) in g.buses().iter().enumerate() {
        y[i * n + i] += Complex64::new(bus.gs, bus.bs) / g.base_mva();
    }
    Ok(Ybus {
        g: Matrix::from_fn(n, n, |i, j| y[i * n + j].re),
        b: Matrix::from_fn(n, n, |i, j| y[i * n + j].im),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowOptions {
    /// Infinity-norm bound on the P/Q mismatch (p.u.).
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    /// Magnitudes (p.u.), bus order.
    pub vm: Vec<f64>,
    /// Angles (rad), slack at 0.
    pub va: Vec<f64>,
    pub iterations: usize,
    pub mismatch: f64,
}

/// Bus roles and scheduled injections for a solve.
struct Setup {
    pv: Vec<usize>,
    pq: Vec<usize>,
    /// Scheduled net injection (p.u.).
    sbus: Vec<Complex64>,
    vm0: Vec<f64>,
}

fn setup(g: &GridGraph) -> Setup {
    let n = g.bus_count();
    let mut sbus: Vec<Complex64> = g
        .buses()
        .iter()
        .map(|b| -Complex64::new(b.pd, b.qd) / g.base_mva())
        .collect();
    let mut vm0 = vec![1.0; n];
    let mut has_gen = vec![false; n];
    for gen in g.generators().iter().filter(|x| x.in_service) {
        let i = g.bus_index(gen.bus).expect("validated");
        sbus[i] += Complex64::new(gen.pg, gen.qg) / g.base_mva();
        if !has_gen[i] {
            vm0[i] = gen.vg;
        }
        has_gen[i] = true;
    }
    let mut pv = Vec::new();
    let mut pq = Vec::new();
    for (i, b) in g.buses().iter().enumerate() {
        match b.kind {
            BusType::Slack => {
                if !has_gen[i] {
                    vm0[i] = b.vm;
                }
            }
            BusType::Pv if has_gen[i] => pv.push(i),
            _ => {
                vm0[i] = 1.0;
                pq.push(i);
            }
        }
    }
    Setup { pv, pq, sbus, vm0 }
}

fn complex_voltages(vm: &[f64], va: &[f64]) -> Vec<Complex64> {
    vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect()
}

fn currents(y: &Ybus, v: &[Complex64]) -> Vec<Complex64> {
    let n = v.len();
    (0..n)
        .map(|i| (0..n).map(|j| y.get(i, j) * v[j]).sum())
        .collect()
}

/// `V ⊙ conj(Y V) − S_sched` per bus.
fn mismatch_vector(y: &Ybus, v: &[Complex64], sbus: &[Complex64]) -> Vec<Complex64> {
    currents(y, v)
        .iter()
        .zip(v)
        .zip(sbus)
        .map(|((i, vv), s)| vv * i.conj() - s)
        .collect()
}

/// Largest |ΔP| over non-slack buses and |ΔQ| over PQ buses, with the bus
/// position where it occurs.
fn worst(mis: &[Complex64], pv: &[usize], pq: &[usize]) -> (f64, usize) {
    let mut best = (0.0, 0);
    for &i in pv.iter().chain(pq) {
        if mis[i].re.abs() > best.0 {
            best = (mis[i].re.abs(), i);
        }
    }
    for &i in pq {
        if mis[i].im.abs() > best.0 {
            best = (mis[i].im.abs(), i);
        }
    }
    best
}

/// Substitutes a state into the power-balance equations of `g`; returns
/// the infinity norm of the P (non-slack) and Q (PQ) mismatches.
pub fn power_mismatch(g: &GridGraph, vm: &[f64], va: &[f64]) -> Result<f64, PowerFlowError> {
    let y = build_ybus(g)?;
    let s = setup(g);
    let mis = mismatch_vector(&y, &complex_voltages(vm, va), &s.sbus);
    Ok(worst(&mis, &s.pv, &s.pq).0)
}

/// Solves the AC power flow from a flat start (slack angle 0).
pub fn solve(g: &GridGraph, opts: &PowerFlowOptions) -> Result<PowerFlowSolution, PowerFlowError> {
    let y = build_ybus(g)?;
    let s = setup(g);
    let n = g.bus_count();
    let mut vm = s.vm0.clone();
    let mut va = vec![0.0; n];
    let pvpq: Vec<usize> = s.pv.iter().chain(&s.pq).copied().collect();
    let (npvpq, npq) = (pvpq.len(), s.pq.len());

    let mut iterations = 0;
    loop {
        let v = complex_voltages(&vm, &va);
        let mis = mismatch_vector(&y, &v, &s.sbus);
        let (norm, at) = worst(&mis, &s.pv, &s.pq);
        if norm < opts.tolerance {
            return Ok(PowerFlowSolution {
                vm,
                va,
                iterations,
                mismatch: norm,
            });
        }
        if iterations == opts.max_iter || !norm.is_finite() {
            return Err(PowerFlowError::NonConvergence {
                iterations,
                mismatch: norm,
                bus: g.buses()[at].id,
            });
        }
        iterations += 1;

        // dS/dVa = j·diag(V)·conj(diag(I) − Y·diag(V))
        // dS/dVm = diag(V)·conj(Y·diag(V/|V|)) + conj(diag(I))·diag(V/|V|)
        let ibus = currents(&y, &v);
        let vnorm: Vec<Complex64> = v.iter().map(|x| x / x.norm()).collect();
        let ds_dva = |i: usize, j: usize| {
            let mut t = -y.get(i, j) * v[j];
            if i == j {
                t += ibus[i];
            }
            Complex64::new(0.0, 1.0) * v[i] * t.conj()
        };
        let ds_dvm = |i: usize, j: usize| {
            let mut t = v[i] * (y.get(i, j) * vnorm[j]).conj();
            if i == j {
                t += ibus[i].conj() * vnorm[i];
            }
            t
        };
        let dim = npvpq + npq;
        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for (r, &i) in pvpq.iter().enumerate() {
            rhs[r] = -mis[i].re;
            for (c, &j) in pvpq.iter().enumerate() {
                jac[(r, c)] = ds_dva(i, j).re;
            }
            for (c, &j) in s.pq.iter().enumerate() {
                jac[(r, npvpq + c)] = ds_dvm(i, j).re;
            }
        }
        for (r, &i) in s.pq.iter().enumerate() {
            rhs[npvpq + r] = -mis[i].im;
            for (c, &j) in pvpq.iter().enumerate() {
                jac[(npvpq + r, c)] = ds_dva(i, j).im;
            }
            for (c, &j) in s.pq.iter().enumerate() {
                jac[(npvpq + r, npvpq + c)] = ds_dvm(i, j).im;
            }
        }
        let dx = jac
            .lu()
            .solve(&rhs)
            .filter(|d| d.iter().all(|x| x.is_finite()))
            .ok_or(PowerFlowError::SingularJacobian(iterations))?;
        for (c, &i) in pvpq.iter().enumerate() {
            va[i] += dx[c];
        }
        for (c, &i) in s.pq.iter().enumerate() {
            vm[i] += dx[npvpq + c];
        }
    }
}

/// Apparent power |S| (MVA) entering each branch at its from-end; zero for
/// branches out of service.
pub fn branch_flows(g: &GridGraph, sol: &PowerFlowSolution) -> Result<Vec<f64>, PowerFlowError> {
    let v = complex_voltages(&sol.vm, &sol.va);
    let mut out = vec![0.0; g.branches().len()];
    for (k, br) in g.branches().iter().enumerate() {
        if !br.in_service {
            continue;
        }
        let (yff, yft, _, _) = branch_admittances(g, k)?;
        let (f, t) = g.endpoints(k);
        let i_from = yff * v[f] + yft * v[t];
        out[k] = (v[f] * i_from.conj()).norm() * g.base_mva();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{cases, parse_case, Branch, Bus, Generator};

    fn bus(id: u32, kind: BusType, pd: f64) -> Bus {
        Bus {
            id,
            kind,
            pd,
            qd: 0.0,
            gs: 0.0,
            bs: 0.0,
            area: 1,
            vm: 1.0,
            va_deg: 0.0,
            base_kv: 0.0,
            zone: 1,
            vmax: 1.1,
            vmin: 0.9,
        }
    }

    fn line(from: u32, to: u32, r: f64, x: f64) -> Branch {
        Branch {
            from,
            to,
            r,
            x,
            b: 0.0,
            rate_a: 0.0,
            rate_b: 0.0,
            rate_c: 0.0,
            ratio: 0.0,
            shift_deg: 0.0,
            in_service: true,
            angmin: -360.0,
            angmax: 360.0,
        }
    }

    fn slack_gen(bus: u32) -> Generator {
        Generator {
            bus,
            pg: 0.0,
            qg: 0.0,
            qmax: 999.0,
            qmin: -999.0,
            vg: 1.0,
            mbase: 100.0,
            in_service: true,
            pmax: 999.0,
            pmin: 0.0,
        }
    }

    fn two_bus(load_mw: f64) -> GridGraph {
        GridGraph::new(
            "two",
            100.0,
            vec![bus(1, BusType::Slack, 0.0), bus(2, BusType::Pq, load_mw)],
            vec![slack_gen(1)],
            vec![line(1, 2, 0.0, 0.1)],
        )
        .unwrap()
    }

    #[test]
    fn single_branch_ybus() {
        let y = build_ybus(&two_bus(0.0)).unwrap();
        let expect = [[-10.0, 10.0], [10.0, -10.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!(y.g[(i, j)].abs() < 1e-12);
                assert!((y.b[(i, j)] - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shunt_is_diagonal_only() {
        let mut g = two_bus(0.0);
        let base = build_ybus(&g).unwrap();
        let mut buses = g.buses().to_vec();
        buses[1].bs = 19.0;
        buses[1].gs = 5.0;
        g = GridGraph::new("two", 100.0, buses, g.generators().to_vec(), g.branches().to_vec())
            .unwrap();
        let y = build_ybus(&g).unwrap();
        let dg = y.g.sub(&base.g).unwrap();
        let db = y.b.sub(&base.b).unwrap();
        assert_eq!(dg, Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.05]]));
        assert!((db[(1, 1)] - 0.19).abs() < 1e-15);
        assert_eq!((db[(0, 0)], db[(0, 1)], db[(1, 0)]), (0.0, 0.0, 0.0));
    }

    /// `Y = Cfᵀ·Yf + Ctᵀ·Yt + diag(Ysh)` with `Yf = diag(yff)·Cf + diag(yft)·Ct`
    /// and `Yt = diag(ytf)·Cf + diag(ytt)·Ct`, built from first principles.
    #[test]
    fn ieee14_ybus_matches_incidence_assembly() {
        let g = parse_case(cases::IEEE14).unwrap();
        let n = g.bus_count();
        let nl = g.branches().len();
        let mut cf = vec![vec![0.0; n]; nl];
        let mut ct = vec![vec![0.0; n]; nl];
        let mut prims = Vec::new();
        for (k, br) in g.branches().iter().enumerate() {
            cf[k][g.bus_index(br.from).unwrap()] = 1.0;
            ct[k][g.bus_index(br.to).unwrap()] = 1.0;
            let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
            let bc = Complex64::new(0.0, br.b / 2.0);
            let t = if br.ratio == 0.0 { 1.0 } else { br.ratio };
            prims.push(((ys + bc) / (t * t), -ys / t, -ys / t, ys + bc));
        }
        let y = build_ybus(&g).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..nl {
                    let (yff, yft, ytf, ytt) = prims[k];
                    let yf_kj = yff * cf[k][j] + yft * ct[k][j];
                    let yt_kj = ytf * cf[k][j] + ytt * ct[k][j];
                    acc += yf_kj * cf[k][i] + yt_kj * ct[k][i];
                }
                if i == j {
                    let b = &g.buses()[i];
                    acc += Complex64::new(b.gs, b.bs) / 100.0;
                }
                assert!((acc - y.get(i, j)).norm() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn zero_load_is_flat() {
        let sol = solve(&two_bus(0.0), &PowerFlowOptions::default()).unwrap();
        assert!(sol.iterations <= 1);
        assert_eq!(sol.vm, vec![1.0, 1.0]);
        assert_eq!(sol.va, vec![0.0, 0.0]);
    }

    #[test]
    fn two_bus_hand_check() {
        let sol = solve(&two_bus(100.0), &PowerFlowOptions::default()).unwrap();
        let p = sol.vm[0] * sol.vm[1] / 0.1 * (sol.va[0] - sol.va[1]).sin();
        assert!((p - 1.0).abs() < 1e-8, "{p}");
        assert_eq!(sol.va[0], 0.0);
    }

    #[test]
    fn ieee14_matches_reference() {
        let g = parse_case(cases::IEEE14).unwrap();
        let sol = solve(&g, &PowerFlowOptions::default()).unwrap();
        assert!(sol.iterations <= 10 && sol.mismatch < 1e-8);
        // Independent flat-start NR solution at 1e-12 tolerance.
        let refs = [
            (4, 1.017670853691765, -0.17999407949370594),
            (14, 1.0355299458535663, -0.27983988812901267),
        ];
        for (id, vm, va) in refs {
            let i = g.bus_index(id).unwrap();
            assert!((sol.vm[i] - vm).abs() < 1e-7);
            assert!((sol.va[i] - va).abs() < 1e-7);
        }
        assert!(power_mismatch(&g, &sol.vm, &sol.va).unwrap() < 1e-8);
        for gen in g.generators() {
            let i = g.bus_index(gen.bus).unwrap();
            assert_eq!(sol.vm[i], gen.vg);
        }
    }

    #[test]
    fn ieee118_matches_reference() {
        let g = parse_case(cases::IEEE118).unwrap();
        let sol = solve(&g, &PowerFlowOptions::default()).unwrap();
        // The reference keeps the slack at 30°; shift to slack-at-zero.
        let shift = 30f64.to_radians();
        let refs = [
            (5, 1.0019846369032663, 0.27958740866672294),
            (117, 0.9738244468092152, 0.19107710435552033),
        ];
        for (id, vm, va) in refs {
            let i = g.bus_index(id).unwrap();
            assert!((sol.vm[i] - vm).abs() < 1e-7);
            assert!((sol.va[i] - (va - shift)).abs() < 1e-7);
        }
    }

    #[test]
    fn unloaded_network_without_charging_is_flat() {
        let g = parse_case(cases::IEEE14).unwrap();
        let mut buses = g.buses().to_vec();
        for b in &mut buses {
            b.gs = 0.0;
            b.bs = 0.0;
        }
        let mut gens = g.generators().to_vec();
        for x in &mut gens {
            x.pg = 0.0;
            x.qg = 0.0;
            x.vg = 1.0;
        }
        let mut branches = g.branches().to_vec();
        for br in &mut branches {
            br.b = 0.0;
            br.ratio = 0.0;
        }
        let g0 = GridGraph::new("flat", 100.0, buses, gens, branches)
            .unwrap()
            .with_scaled_loads(0.0);
        let sol = solve(&g0, &PowerFlowOptions::default()).unwrap();
        assert!(sol.vm.iter().all(|&v| v == 1.0));
        assert!(sol.va.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn deterministic() {
        let g = parse_case(cases::IEEE30).unwrap();
        let a = solve(&g, &PowerFlowOptions::default()).unwrap();
        let b = solve(&g, &PowerFlowOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_convergence_reported() {
        let err = solve(&two_bus(5000.0), &PowerFlowOptions::default()).unwrap_err();
        assert!(matches!(
            err,
            PowerFlowError::NonConvergence { .. } | PowerFlowError::SingularJacobian(_)
        ));
    }

    #[test]
    fn flows_are_positive_on_loaded_lines() {
        let g = parse_case(cases::IEEE14).unwrap();
        let sol = solve(&g, &PowerFlowOptions::default()).unwrap();
        let f = branch_flows(&g, &sol).unwrap();
        assert!(f.iter().all(|&x| x >= 0.0));
        // Line 1-2 carries the most power in the base case.
        let k = g.parse_branch_ref("1-2").unwrap();
        assert!(f.iter().all(|&x| x <= f[k]));
    }
}
