//! Backward/forward sweep AC power flow for radial feeders.
//!
//! Loads are constant power. A regulated line is modelled as its series
//! impedance followed by an ideal transformer of ratio `1 + step·tap` at the
//! receiving end. Capacitor banks are fixed reactive injections.

use std::io::Write;

use num_complex::Complex64;
use thiserror::Error;

use crate::gc::RelaxedPfState;
use crate::grid::{GridError, RadialNetwork, Topology};

pub const MISMATCH_TOL: f64 = 1e-8;
pub const MAX_SWEEPS: usize = 50;

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("expected {expected} bus injections, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite injection at bus {0}")]
    NonFinite(usize),
    #[error("tap {tap} on line {line} outside [{min}, {max}]")]
    TapRange {
        line: usize,
        tap: i32,
        min: i32,
        max: i32,
    },
    #[error("power flow did not converge in {iterations} sweeps (mismatch {mismatch:e} pu)")]
    NonConvergence { iterations: usize, mismatch: f64 },
}

/// One hour of a power-flow study.
#[derive(Debug, Clone)]
pub struct PfCase<'a> {
    pub net: &'a RadialNetwork,
    /// Net consumption per bus in kW + j·kVAr (positive = load, negative =
    /// export), excluding capacitor banks which the solver adds itself.
    pub net_load: Vec<Complex64>,
    /// Tap position per line (ignored for lines without a regulator).
    pub taps: Vec<i32>,
}

impl<'a> PfCase<'a> {
    pub fn new(net: &'a RadialNetwork, net_load: Vec<Complex64>) -> Self {
        let taps = vec![0; net.lines.len()];
        PfCase { net, net_load, taps }
    }

    pub fn with_taps(mut self, taps: Vec<i32>) -> Self {
        self.taps = taps;
        self
    }
}

#[derive(Debug, Clone)]
pub struct PfSolution {
    /// Complex bus voltages, pu.
    pub v: Vec<Complex64>,
    /// Sending-end (upstream side) power per line, kW + j·kVAr.
    pub flows: Vec<Complex64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest per-bus power balance residual, pu.
    pub mismatch: f64,
    /// Series current per line (upstream side of any regulator), pu.
    pub currents: Vec<Complex64>,
}

impl PfSolution {
    pub fn v_mag(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.norm()).collect()
    }

    pub fn v_sq(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.norm_sqr()).collect()
    }
}

fn ratio(net: &RadialNetwork, taps: &[i32], line: usize) -> f64 {
    net.lines[line]
        .regulator
        .as_ref()
        .map(|r| r.ratio(taps[line]))
        .unwrap_or(1.0)
}

/// Per-bus consumption in pu including capacitor banks.
fn loads_pu(net: &RadialNetwork, net_load: &[Complex64]) -> Vec<Complex64> {
    net.buses
        .iter()
        .zip(net_load)
        .map(|(b, s)| {
            let q_cap = if b.has_cap_bank { b.cap_bank_q } else { 0.0 };
            Complex64::new(net.kw_to_pu(s.re), net.kw_to_pu(s.im - q_cap))
        })
        .collect()
}

pub fn run_power_flow(case: &PfCase) -> Result<PfSolution, PowerFlowError> {
    let net = case.net;
    let n = net.n_buses();
    if case.net_load.len() != n {
        return Err(PowerFlowError::Dimension {
            expected: n,
            found: case.net_load.len(),
        });
    }
    if case.taps.len() != net.lines.len() {
        return Err(PowerFlowError::Dimension {
            expected: net.lines.len(),
            found: case.taps.len(),
        });
    }
    if let Some(i) = case.net_load.iter().position(|s| !s.re.is_finite() || !s.im.is_finite()) {
        return Err(PowerFlowError::NonFinite(i));
    }
    for (li, l) in net.lines.iter().enumerate() {
        if let Some(r) = &l.regulator {
            let tap = case.taps[li];
            if tap < r.tap_min || tap > r.tap_max {
                return Err(PowerFlowError::TapRange {
                    line: li,
                    tap,
                    min: r.tap_min,
                    max: r.tap_max,
                });
            }
        }
    }
    let topo = net.topology()?;
    let load = loads_pu(net, &case.net_load);

    let mut v = vec![Complex64::new(1.0, 0.0); n];
    let mut s_down = vec![Complex64::new(0.0, 0.0); n];
    let mut send = vec![Complex64::new(0.0, 0.0); net.lines.len()];
    let mut cur = vec![Complex64::new(0.0, 0.0); net.lines.len()];
    let mut mismatch = f64::INFINITY;
    let mut iterations = 0;

    while iterations < MAX_SWEEPS {
        iterations += 1;
        // backward: accumulate downstream power and line currents
        for &b in topo.order.iter().rev() {
            let mut s = load[b];
            for &l in &topo.child_lines[b] {
                s += send[l];
            }
            s_down[b] = s;
            if let Some(l) = topo.parent_line[b] {
                let a = ratio(net, &case.taps, l);
                let i2 = (s / v[b]).conj();
                let i1 = i2 * a;
                cur[l] = i1;
                send[l] = s + net.lines[l].impedance * i1.norm_sqr();
            }
        }
        // forward: update voltages from the root
        for &b in topo.order.iter().skip(1) {
            let l = topo.parent_line[b].expect("non-root bus has a parent line");
            let p = topo.upstream(net, l);
            let a = ratio(net, &case.taps, l);
            v[b] = (v[p] - net.lines[l].impedance * cur[l]) * a;
        }
        mismatch = balance_residual(net, &topo, &case.taps, &load, &v, &cur)
            .into_iter()
            .fold(0.0, f64::max);
        if mismatch < MISMATCH_TOL {
            break;
        }
    }
    let converged = mismatch < MISMATCH_TOL;
    if !converged {
        return Err(PowerFlowError::NonConvergence {
            iterations,
            mismatch,
        });
    }
    // final flows consistent with the converged voltages
    let base_kva = net.base_mva * 1000.0;
    let flows = (0..net.lines.len())
        .map(|l| {
            let p = topo.upstream(net, l);
            v[p] * cur[l].conj() * base_kva
        })
        .collect();
    Ok(PfSolution {
        v,
        flows,
        converged,
        iterations,
        mismatch,
        currents: cur,
    })
}

/// Per-bus complex power balance |S_in − load − S_out| in pu, evaluated from
/// voltages and branch currents. Currents of non-ideal lines are recomputed
/// from Ohm's law; ideal ties use the supplied currents.
fn balance_residual(
    net: &RadialNetwork,
    topo: &Topology,
    taps: &[i32],
    load: &[Complex64],
    v: &[Complex64],
    cur: &[Complex64],
) -> Vec<f64> {
    let n = net.n_buses();
    let current = |l: usize| -> Complex64 {
        let line = &net.lines[l];
        if line.is_ideal() {
            return cur[l];
        }
        let a = ratio(net, taps, l);
        let p = topo.upstream(net, l);
        let c = topo.downstream(net, l);
        (v[p] - v[c] / a) * line.admittance
    };
    let mut res = vec![0.0; n];
    for b in 0..n {
        if b == topo.root {
            continue;
        }
        let l = topo.parent_line[b].expect("non-root bus has a parent line");
        let a = ratio(net, taps, l);
        let s_in = v[b] / a * current(l).conj();
        let s_out: Complex64 = topo.child_lines[b]
            .iter()
            .map(|&cl| v[b] * current(cl).conj())
            .sum();
        res[b] = (s_in - load[b] - s_out).norm();
    }
    res
}

/// Independent power balance check for a converged solution, pu per bus.
pub fn bus_mismatch(
    net: &RadialNetwork,
    net_load: &[Complex64],
    taps: &[i32],
    sol: &PfSolution,
) -> Result<Vec<f64>, PowerFlowError> {
    let topo = net.topology()?;
    let load = loads_pu(net, net_load);
    Ok(balance_residual(net, &topo, taps, &load, &sol.v, &sol.currents))
}

/// Advances regulator taps by at most one step toward their set points.
/// Unidirectional regulators hold position under reverse flow.
pub fn update_regulator_taps(net: &RadialNetwork, sol: &PfSolution, taps: &[i32]) -> Vec<i32> {
    let topo = match net.topology() {
        Ok(t) => t,
        Err(_) => return taps.to_vec(),
    };
    let mut next = taps.to_vec();
    for (li, line) in net.lines.iter().enumerate() {
        let Some(reg) = &line.regulator else { continue };
        let reverse = sol.flows[li].re < 0.0;
        if reverse && reg.unidirectional {
            continue;
        }
        let vm = sol.v[topo.downstream(net, li)].norm();
        let mut tap = taps[li];
        if vm < reg.target_v - reg.deadband {
            tap += 1;
        } else if vm > reg.target_v + reg.deadband {
            tap -= 1;
        }
        next[li] = reg.clamp_tap(tap);
    }
    next
}

/// Largest |  |v_i|² − w_ii | over buses for one hour of a relaxed solution.
pub fn verify_against_relaxation(pf: &PfSolution, relaxed: &RelaxedPfState, hour: usize) -> f64 {
    pf.v
        .iter()
        .enumerate()
        .map(|(i, v)| (v.norm_sqr() - relaxed.w_diag[i][hour]).abs())
        .fold(0.0, f64::max)
}

pub fn write_voltage_rows<W: Write>(
    w: &mut csv::Writer<W>,
    hour: usize,
    sol: &PfSolution,
) -> csv::Result<()> {
    for (bus, v) in sol.v.iter().enumerate() {
        w.write_record([
            hour.to_string(),
            bus.to_string(),
            format!("{:.9}", v.norm()),
            format!("{:.9}", v.arg()),
        ])?;
    }
    Ok(())
}

pub fn write_flow_rows<W: Write>(
    w: &mut csv::Writer<W>,
    hour: usize,
    sol: &PfSolution,
) -> csv::Result<()> {
    for (line, s) in sol.flows.iter().enumerate() {
        w.write_record([
            hour.to_string(),
            line.to_string(),
            format!("{:.6}", s.re),
            format!("{:.6}", s.im),
        ])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, Line, RegulatorSpec};

    fn two_bus(z: Complex64) -> RadialNetwork {
        let mut sub = Bus::new(0);
        sub.is_substation = true;
        let mut b1 = Bus::new(1);
        b1.transformer_rating = Some(500.0);
        RadialNetwork {
            buses: vec![sub, b1],
            lines: vec![Line::new(0, 1, z)],
            base_mva: 1.0,
            base_kv: 4.16,
            per_unit: true,
        }
    }

    /// Receiving-end |V|² for a 2-bus feeder with constant-power load S (pu)
    /// from the closed-form quadratic in v = |V₂|²:
    /// v² + (2(rP + xQ) − 1)v + |z|²|S|² = 0, high-voltage root.
    fn closed_form_v2(z: Complex64, s: Complex64) -> f64 {
        let b = 2.0 * (z.re * s.re + z.im * s.im) - 1.0;
        let c = z.norm_sqr() * s.norm_sqr();
        (-b + (b * b - 4.0 * c).sqrt()) / 2.0
    }

    #[test]
    fn flat_case() {
        let net = two_bus(Complex64::new(0.01, 0.02));
        let sol = run_power_flow(&PfCase::new(&net, vec![Complex64::default(); 2])).unwrap();
        assert!(sol.v.iter().all(|v| (v - 1.0).norm() < 1e-14));
        assert!(sol.flows.iter().all(|f| f.norm() < 1e-12));
    }

    #[test]
    fn two_bus_matches_closed_form() {
        let z = Complex64::new(0.01, 0.02);
        let net = two_bus(z);
        // 0.1 + j0.05 pu on a 1 MVA base
        let load = vec![Complex64::default(), Complex64::new(100.0, 50.0)];
        let sol = run_power_flow(&PfCase::new(&net, load)).unwrap();
        let want = closed_form_v2(z, Complex64::new(0.1, 0.05));
        assert!((sol.v[1].norm_sqr() - want).abs() < 1e-9, "{} vs {want}", sol.v[1].norm_sqr());
        assert!(sol.v[1].norm() < 1.0);
    }

    #[test]
    fn export_raises_voltage() {
        let z = Complex64::new(0.01, 0.02);
        let net = two_bus(z);
        let load = vec![Complex64::default(), Complex64::new(-100.0, 0.0)];
        let sol = run_power_flow(&PfCase::new(&net, load)).unwrap();
        let want = closed_form_v2(z, Complex64::new(-0.1, 0.0));
        assert!(sol.v[1].norm() > 1.0);
        assert!((sol.v[1].norm_sqr() - want).abs() < 1e-9);
    }

    #[test]
    fn zero_impedance_tie_passes_voltage() {
        let net = two_bus(Complex64::new(0.0, 0.0));
        let load = vec![Complex64::default(), Complex64::new(80.0, 20.0)];
        let sol = run_power_flow(&PfCase::new(&net, load)).unwrap();
        assert!((sol.v[1] - 1.0).norm() < 1e-12);
        assert!((sol.flows[0] - Complex64::new(80.0, 20.0)).norm() < 1e-9);
    }

    fn regulated(unidirectional: bool) -> RadialNetwork {
        let mut net = two_bus(Complex64::new(0.01, 0.02));
        net.lines[0] = net.lines[0].clone().with_regulator(RegulatorSpec {
            tap_min: -1,
            tap_max: 1,
            step: 0.00625,
            target_v: 1.0,
            deadband: 0.005,
            unidirectional,
        });
        net
    }

    #[test]
    fn tap_raises_on_low_forward_voltage() {
        let net = regulated(true);
        let load = vec![Complex64::default(), Complex64::new(800.0, 200.0)];
        let sol = run_power_flow(&PfCase::new(&net, load.clone())).unwrap();
        assert!(sol.v[1].norm() < 0.995);
        assert_eq!(update_regulator_taps(&net, &sol, &[0]), vec![1]);
        // clamped at tap_max
        let case = PfCase::new(&net, load).with_taps(vec![1]);
        let sol = run_power_flow(&case).unwrap();
        assert!(sol.v[1].norm() < 0.995);
        assert_eq!(update_regulator_taps(&net, &sol, &[1]), vec![1]);
    }

    #[test]
    fn unidirectional_holds_under_reverse_flow() {
        let load = vec![Complex64::default(), Complex64::new(-400.0, 0.0)];
        let net = regulated(true);
        let sol = run_power_flow(&PfCase::new(&net, load.clone()).with_taps(vec![1])).unwrap();
        assert!(sol.flows[0].re < 0.0 && sol.v[1].norm() > 1.005);
        assert_eq!(update_regulator_taps(&net, &sol, &[1]), vec![1]);
        let net = regulated(false);
        let sol = run_power_flow(&PfCase::new(&net, load).with_taps(vec![1])).unwrap();
        assert_eq!(update_regulator_taps(&net, &sol, &[1]), vec![0]);
    }

    #[test]
    fn tap_out_of_range_rejected() {
        let net = regulated(true);
        let case = PfCase::new(&net, vec![Complex64::default(); 2]).with_taps(vec![2]);
        assert!(matches!(run_power_flow(&case), Err(PowerFlowError::TapRange { .. })));
    }
}
