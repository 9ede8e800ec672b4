mod common;

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use common::{two_bus, two_bus_v_sq};
use gridbound::forecast::Forecast;
use gridbound::gc::{check_exactness, solve_direction, Direction, GcInputs, GcParams};
use gridbound::grid::{feeder15, RadialNetwork};
use gridbound::powerflow::{run_power_flow, verify_against_relaxation, PfCase, PfSolution, MISMATCH_TOL};
use num_complex::Complex64;
use proptest::prelude::*;

/// Kirchhoff residual recomputed from voltages alone (all ratios 1):
/// line currents from the voltage drop, then V_i·conj(net inflow) against
/// the bus consumption including capacitor banks.
fn kcl_residual(net: &RadialNetwork, load_kw: &[Complex64], sol: &PfSolution) -> f64 {
    let mut inflow = vec![Complex64::new(0.0, 0.0); net.n_buses()];
    for l in &net.lines {
        let i = (sol.v[l.from] - sol.v[l.to]) / l.impedance;
        inflow[l.to] += i;
        inflow[l.from] -= i;
    }
    net.buses
        .iter()
        .filter(|b| !b.is_substation)
        .map(|b| {
            let cap = if b.has_cap_bank { b.cap_bank_q } else { 0.0 };
            let s = Complex64::new(net.kw_to_pu(load_kw[b.id].re), net.kw_to_pu(load_kw[b.id].im - cap));
            (sol.v[b.id] * inflow[b.id].conj() - s).norm()
        })
        .fold(0.0, f64::max)
}

fn without_caps(mut net: RadialNetwork) -> RadialNetwork {
    for b in &mut net.buses {
        b.has_cap_bank = false;
        b.cap_bank_q = 0.0;
    }
    net
}

fn loads_with_pf(net: &RadialNetwork, p: &[f64]) -> Vec<Complex64> {
    net.buses
        .iter()
        .map(|b| {
            if b.is_substation {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(p[b.id], p[b.id] * b.q_per_p())
            }
        })
        .collect()
}

#[test]
fn two_bus_matches_closed_form() {
    let (r, x) = (0.01, 0.02);
    let net = two_bus(r, x, 1000.0);
    let load = vec![Complex64::new(0.0, 0.0), Complex64::new(100.0, 50.0)];
    let sol = run_power_flow(&PfCase::new(&net, load)).unwrap();
    assert!(sol.converged);
    assert_abs_diff_eq!(sol.v[1].norm_sqr(), two_bus_v_sq(r, x, 0.1, 0.05), epsilon = 1e-8);
    // Sending-end flow is the load plus I²z, to the sweep tolerance (1e-8 pu).
    let loss = sol.currents[0].norm_sqr() * Complex64::new(r, x);
    assert_abs_diff_eq!(sol.flows[0].re, 100.0 + 1000.0 * loss.re, epsilon = 1e-5);
    assert_abs_diff_eq!(sol.flows[0].im, 50.0 + 1000.0 * loss.im, epsilon = 1e-5);
}

#[test]
fn export_raises_voltage() {
    let (r, x) = (0.05, 0.05);
    let net = two_bus(r, x, 1000.0);
    let load = vec![Complex64::new(0.0, 0.0), Complex64::new(-300.0, 0.0)];
    let sol = run_power_flow(&PfCase::new(&net, load)).unwrap();
    assert!(sol.v[1].norm() > 1.0);
    assert_abs_diff_eq!(sol.v[1].norm_sqr(), two_bus_v_sq(r, x, -0.3, 0.0), epsilon = 1e-8);
}

#[test]
fn two_bus_relaxation_agrees_in_band() {
    let net = two_bus(0.05, 0.08, 1000.0);
    let targets = common::single_hour_targets(250.0, 100.0, 200.0);
    let params = GcParams {
        tol: 1e-8,
        ..GcParams::default()
    };
    let inp = common::gc_inputs(&net, targets, params);
    let res = solve_direction(&inp, Direction::Upper).unwrap();
    let x = res.x[&1][0];
    let sol = run_power_flow(&PfCase::new(&net, vec![Complex64::new(0.0, 0.0), Complex64::new(x, 0.0)])).unwrap();
    assert!(check_exactness(&res.state).exact);
    assert!(verify_against_relaxation(&sol, &res.state, 0) <= 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn power_balance_holds(p in prop::collection::vec(-40.0f64..60.0, 15)) {
        let net = feeder15();
        let load = loads_with_pf(&net, &p);
        let sol = run_power_flow(&PfCase::new(&net, load.clone())).unwrap();
        prop_assert!(sol.converged);
        prop_assert!(sol.mismatch <= MISMATCH_TOL);
        prop_assert!(kcl_residual(&net, &load, &sol) <= MISMATCH_TOL);
    }

    #[test]
    fn voltage_falls_along_consuming_paths(p in prop::collection::vec(0.0f64..40.0, 15)) {
        let net = without_caps(feeder15());
        let sol = run_power_flow(&PfCase::new(&net, loads_with_pf(&net, &p))).unwrap();
        let vm = sol.v_mag();
        for l in &net.lines {
            prop_assert!(vm[l.to] <= vm[l.from] + 1e-12, "line {}-{}", l.from, l.to);
        }
    }

    #[test]
    fn higher_impedance_deepens_deviation(p in prop::collection::vec(0.0f64..20.0, 15)) {
        let net = without_caps(feeder15());
        let mut weak = net.clone();
        for l in &mut weak.lines {
            l.impedance *= 2.0;
            l.admittance = 1.0 / l.impedance;
        }
        let load = loads_with_pf(&net, &p);
        let a = run_power_flow(&PfCase::new(&net, load.clone())).unwrap().v_mag();
        let b = run_power_flow(&PfCase::new(&weak, load)).unwrap().v_mag();
        for i in 0..a.len() {
            prop_assert!((1.0 - b[i]).abs() >= (1.0 - a[i]).abs() - 1e-12, "bus {i}");
        }
    }

    #[test]
    fn relaxation_matches_power_flow_at_light_load(p in prop::collection::vec(-10.0f64..20.0, 15)) {
        let mut net = feeder15();
        for b in &mut net.buses {
            b.controllable = false;
        }
        let forecasts: BTreeMap<usize, Forecast> = net
            .buses
            .iter()
            .filter(|b| !b.is_substation)
            .map(|b| (b.id, Forecast { node: b.id, mean: vec![p[b.id]], error_std: vec![0.0], pf: b.load_power_factor }))
            .collect();
        let inp = GcInputs {
            net: &net,
            targets: BTreeMap::new(),
            forecasts,
            horizon: 1,
            taps: vec![0; net.lines.len()],
            params: GcParams { tol: 1e-8, ..GcParams::default() },
        };
        let res = solve_direction(&inp, Direction::Upper).unwrap();
        let ex = check_exactness(&res.state);
        prop_assert!(ex.exact, "cone gap {:.2e}", ex.max_relative);
        let sol = run_power_flow(&PfCase::new(&net, loads_with_pf(&net, &p))).unwrap();
        prop_assert!(verify_against_relaxation(&sol, &res.state, 0) <= 1e-4);
    }
}
