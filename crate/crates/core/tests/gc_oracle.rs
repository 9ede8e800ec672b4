//! Two-bus bound programs checked against an exhaustive grid search that
//! re-derives the objective and feasible set from the model equations.

mod common;

use common::{gc_inputs, grid_search_two_bus, single_hour_targets, two_bus, GridOptimum};
use gridbound::gc::{check_exactness, schedule_bounds, solve_direction, Direction, GcParams};

const GRID_STEP: f64 = 1e-3;
const X_TOL_PU: f64 = 1e-2;
const W_TOL: f64 = 1e-2;

struct Case {
    name: &'static str,
    r: f64,
    x: f64,
    upper_kw: f64,
    lower_kw: f64,
    base_kw: f64,
    params: GcParams,
}

fn params(lambda_d: f64, loss_weight: f64) -> GcParams {
    GcParams {
        lambda_d,
        loss_weight,
        tol: 1e-8,
        ..GcParams::default()
    }
}

/// Oracle objective at a solver point, using the same formula as the grid.
fn oracle_objective(c: &Case, dir: Direction, x_pu: f64, w: f64) -> f64 {
    let p = &c.params;
    let g = c.r / (c.r * c.r + c.x * c.x);
    let target = match dir {
        Direction::Upper => c.upper_kw,
        Direction::Lower => c.lower_kw,
    } / 1000.0;
    let hi = (w - p.vband.1).max(0.0);
    let lo = (p.vband.0 - w).max(0.0);
    p.lambda_v * (hi * hi + lo * lo)
        + (x_pu - target).powi(2)
        + p.lambda_d * (dir.sign() * (c.base_kw / 1000.0 - x_pu)).max(0.0)
        + p.loss_weight * g * (1.0 + w - 2.0 * (w + x_pu * c.r))
}

fn check(c: &Case, dir: Direction) {
    let net = two_bus(c.r, c.x, 1000.0);
    let inp = gc_inputs(&net, single_hour_targets(c.upper_kw, c.lower_kw, c.base_kw), c.params);
    let res = solve_direction(&inp, dir).unwrap();
    assert!(res.optimal, "{}: {dir} solve not optimal", c.name);

    let x_pu = res.x[&1][0] / 1000.0;
    let w = res.state.w_diag[1][0];
    let target = match dir {
        Direction::Upper => c.upper_kw,
        Direction::Lower => c.lower_kw,
    } / 1000.0;
    let best: GridOptimum = grid_search_two_bus(
        c.r,
        c.x,
        target,
        c.base_kw / 1000.0,
        dir,
        &c.params,
        (-1.0, 1.0),
        (0.5, 1.5),
        GRID_STEP,
    );

    assert!(
        (x_pu - best.x_pu).abs() <= X_TOL_PU,
        "{} {dir}: x solver {x_pu:.4} vs grid {:.4}",
        c.name,
        best.x_pu
    );
    assert!(
        (w - best.w).abs() <= W_TOL,
        "{} {dir}: w solver {w:.4} vs grid {:.4}",
        c.name,
        best.w
    );
    // The grid is a subset of the feasible set, so the solver can only do
    // better, up to its own feasibility tolerance.
    let f = oracle_objective(c, dir, x_pu, w);
    assert!(
        f <= best.objective + 1e-6,
        "{} {dir}: solver objective {f:.6e} above grid optimum {:.6e}",
        c.name,
        best.objective
    );
    // Coarse grid error bound: the true optimum can be at most this much lower.
    assert!(best.objective - f <= 0.05 * best.objective.abs().max(1e-3));
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "export, hinge binds",
            r: 0.15,
            x: 0.15,
            upper_kw: -450.0,
            lower_kw: -600.0,
            base_kw: -350.0,
            params: params(10.0, 1e-3),
        },
        Case {
            name: "export, voltage binds",
            r: 0.15,
            x: 0.15,
            upper_kw: -900.0,
            lower_kw: -950.0,
            base_kw: -900.0,
            params: params(0.0, 1e-3),
        },
        Case {
            name: "import, in band",
            r: 0.05,
            x: 0.08,
            upper_kw: 400.0,
            lower_kw: 150.0,
            base_kw: 300.0,
            params: params(10.0, 1e-3),
        },
        Case {
            name: "import, undervoltage",
            r: 0.2,
            x: 0.2,
            upper_kw: 700.0,
            lower_kw: 500.0,
            base_kw: 600.0,
            params: params(0.0, 0.0),
        },
    ]
}

#[test]
fn upper_direction_matches_grid_search() {
    for c in cases() {
        check(&c, Direction::Upper);
    }
}

#[test]
fn lower_direction_matches_grid_search() {
    for c in cases() {
        check(&c, Direction::Lower);
    }
}

#[test]
fn hinge_keeps_upper_bound_at_baseline() {
    // Target below baseline; λ_d = 10 dominates the projection slope
    // 2·(0.1) = 0.2, so the upper bound stops at the baseline.
    let c = &cases()[0];
    let net = two_bus(c.r, c.x, 1000.0);
    let inp = gc_inputs(&net, single_hour_targets(c.upper_kw, c.lower_kw, c.base_kw), c.params);
    let res = solve_direction(&inp, Direction::Upper).unwrap();
    approx::assert_abs_diff_eq!(res.x[&1][0], c.base_kw, epsilon = 1e-2);
}

#[test]
fn in_band_solution_is_exact_and_tracks_target() {
    let c = &cases()[2];
    let net = two_bus(c.r, c.x, 1000.0);
    let inp = gc_inputs(&net, single_hour_targets(c.upper_kw, c.lower_kw, c.base_kw), c.params);
    let sched = schedule_bounds(&inp).unwrap();
    for res in [&sched.upper, &sched.lower] {
        let ex = check_exactness(&res.state);
        assert!(ex.exact, "relative cone gap {:.2e}", ex.max_relative);
    }
    // Loss regulariser shifts the projection by at most loss_w·g·r / 1 pu.
    approx::assert_abs_diff_eq!(sched.bounds[&1].x_upper[0], c.upper_kw, epsilon = 1.0);
    approx::assert_abs_diff_eq!(sched.bounds[&1].x_lower[0], c.lower_kw, epsilon = 1.0);
    assert!(sched.crossings.is_empty());
}

#[test]
fn crossed_solves_are_reconciled_at_midpoint() {
    // Baseline above the upper target and below the lower target with a
    // large hinge weight forces upper < lower before reconciliation.
    let net = two_bus(0.05, 0.08, 1000.0);
    let inp = gc_inputs(&net, single_hour_targets(100.0, 300.0, 200.0), params(0.0, 0.0));
    let sched = schedule_bounds(&inp).unwrap();
    let b = &sched.bounds[&1];
    assert_eq!(sched.crossings, vec![(1, 0)]);
    approx::assert_abs_diff_eq!(b.x_upper[0], b.x_lower[0], epsilon = 1e-12);
    approx::assert_abs_diff_eq!(b.x_upper[0], 200.0, epsilon = 1e-3);
}
