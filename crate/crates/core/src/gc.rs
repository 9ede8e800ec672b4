//! Day-ahead bound scheduler.
//!
//! Solves the relaxed power-flow bound problem once per direction. The model
//! works in net consumption (load positive) and per unit: with
//! `W_e = V_p·conj(V_c)` on every line, the consumption at bus `i` is
//! `Σ_j (W_ij − w_ii)·conj(y_ij)`, which is the branch-flow equality written
//! from the consumer side. Each line's 2×2 voltage block is relaxed to a
//! rotated cone `|W_e|² ≤ w_p·w_c`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::{Constraint, ConvexProgram, LinExpr, SolveError, Solution, Status, Term, VarBlock, TOL_LARGE};
use crate::forecast::{Forecast, TargetPair};
use crate::grid::{GridError, RadialNetwork, Topology};

#[derive(Debug, Error)]
pub enum GcError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("no target for controllable node {0}")]
    MissingTarget(usize),
    #[error("no forecast for non-controllable node {0}")]
    MissingForecast(usize),
    #[error("node {node}: series of length {found}, expected {expected}")]
    Horizon { node: usize, found: usize, expected: usize },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("{direction} bound solve failed: {source}")]
    Solve {
        direction: Direction,
        #[source]
        source: SolveError,
    },
    #[error("bounds csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Upper,
    Lower,
}

impl Direction {
    /// Sign applied inside the direction hinge.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Upper => 1.0,
            Direction::Lower => -1.0,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Upper => "upper",
            Direction::Lower => "lower",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcParams {
    pub lambda_v: f64,
    pub lambda_d: f64,
    /// Squared-voltage band (W_tol−, W_tol+), pu².
    pub vband: (f64, f64),
    /// Weight on total line losses (pu). Makes the cone tight when the
    /// voltage terms are inactive.
    pub loss_weight: f64,
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for GcParams {
    fn default() -> Self {
        GcParams {
            lambda_v: 1e3,
            lambda_d: 10.0,
            vband: (0.9025, 1.1025),
            loss_weight: 1e-3,
            tol: TOL_LARGE,
            max_iter: 200,
        }
    }
}

impl GcParams {
    pub fn validate(&self) -> Result<(), GcError> {
        if !(self.vband.0 < self.vband.1) {
            return Err(GcError::Params(format!("empty voltage band {:?}", self.vband)));
        }
        if self.lambda_v < 0.0 || self.lambda_d < 0.0 || self.loss_weight < 0.0 {
            return Err(GcError::Params("weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GcInputs<'a> {
    pub net: &'a RadialNetwork,
    /// Targets (kW) for every controllable node.
    pub targets: BTreeMap<usize, TargetPair>,
    /// Forecasts (kW) for every other non-substation bus.
    pub forecasts: BTreeMap<usize, Forecast>,
    pub horizon: usize,
    /// Regulator taps per line, frozen for the whole day.
    pub taps: Vec<i32>,
    pub params: GcParams,
}

/// Relaxed power-flow state, pu, indexed `[bus or line][hour]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedPfState {
    pub w_diag: Vec<Vec<f64>>,
    pub w_edge: Vec<Vec<(f64, f64)>>,
    /// Net consumption (P, Q) per bus.
    pub s: Vec<Vec<(f64, f64)>>,
    /// Per line (upstream bus, downstream bus, 1/a²): the cone is
    /// `|W|² ≤ w_up · w_down / a²`.
    pub edge_ends: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayAheadBounds {
    pub node: usize,
    pub x_upper: Vec<f64>,
    pub x_lower: Vec<f64>,
}

/// Variable layout of a bound program.
#[derive(Debug, Clone)]
pub struct BoundLayout {
    pub horizon: usize,
    pub w: VarBlock,
    pub w_edge: VarBlock,
    pub s: VarBlock,
    pub x: VarBlock,
    /// Power sent through each ideal (zero-impedance) line, (P, Q).
    pub tie_flow: Option<VarBlock>,
    pub controllable: Vec<usize>,
    pub edge_ends: Vec<(usize, usize, f64)>,
    ideal_index: Vec<Option<usize>>,
}

impl BoundLayout {
    pub fn w(&self, bus: usize, t: usize) -> usize {
        self.w.at(bus * self.horizon + t)
    }
    pub fn we(&self, line: usize, t: usize) -> (usize, usize) {
        let k = 2 * (line * self.horizon + t);
        (self.w_edge.at(k), self.w_edge.at(k + 1))
    }
    pub fn s(&self, bus: usize, t: usize) -> (usize, usize) {
        let k = 2 * (bus * self.horizon + t);
        (self.s.at(k), self.s.at(k + 1))
    }
    pub fn x(&self, k: usize, t: usize) -> usize {
        self.x.at(k * self.horizon + t)
    }
    fn tie(&self, line: usize, t: usize) -> Option<(usize, usize)> {
        let (b, j) = (self.tie_flow.as_ref()?, self.ideal_index[line]?);
        let k = 2 * (j * self.horizon + t);
        Some((b.at(k), b.at(k + 1)))
    }
}

fn regulator_ratio(net: &RadialNetwork, taps: &[i32], line: usize) -> f64 {
    net.lines[line]
        .regulator
        .as_ref()
        .map(|r| r.ratio(taps.get(line).copied().unwrap_or(0)))
        .unwrap_or(1.0)
}

fn check_len(node: usize, v: &[f64], t: usize) -> Result<(), GcError> {
    if v.len() < t {
        return Err(GcError::Horizon {
            node,
            found: v.len(),
            expected: t,
        });
    }
    Ok(())
}

pub fn build_bound_problem(inp: &GcInputs, dir: Direction) -> Result<(ConvexProgram, BoundLayout), GcError> {
    let net = inp.net;
    let p = &inp.params;
    p.validate()?;
    let topo = net.topology()?;
    let t_len = inp.horizon;
    let n = net.n_buses();
    let controllable = net.controllable();
    for &i in &controllable {
        let tp = inp.targets.get(&i).ok_or(GcError::MissingTarget(i))?;
        for v in [&tp.upper, &tp.lower, &tp.base] {
            check_len(i, v, t_len)?;
        }
    }
    for b in &net.buses {
        if !b.is_substation && !b.controllable {
            let fc = inp.forecasts.get(&b.id).ok_or(GcError::MissingForecast(b.id))?;
            check_len(b.id, &fc.mean, t_len)?;
        }
    }

    let mut prog = ConvexProgram::new();
    let w = prog.add_block("w", n * t_len);
    let w_edge = prog.add_block("w_edge", net.lines.len() * t_len * 2);
    let s = prog.add_block("s", n * t_len * 2);
    let x = prog.add_block("x", controllable.len() * t_len);
    let mut ideal_index = vec![None; net.lines.len()];
    let mut n_ideal = 0;
    for (l, line) in net.lines.iter().enumerate() {
        if line.is_ideal() {
            ideal_index[l] = Some(n_ideal);
            n_ideal += 1;
        }
    }
    let tie_flow = (n_ideal > 0).then(|| prog.add_block("tie_flow", n_ideal * t_len * 2));
    let edge_ends = (0..net.lines.len())
        .map(|l| {
            let a = regulator_ratio(net, &inp.taps, l);
            (topo.upstream(net, l), topo.downstream(net, l), 1.0 / (a * a))
        })
        .collect();
    let lay = BoundLayout {
        horizon: t_len,
        w,
        w_edge,
        s,
        x,
        tie_flow,
        controllable: controllable.clone(),
        edge_ends,
        ideal_index,
    };

    let kw = |v: f64| net.kw_to_pu(v);
    for t in 0..t_len {
        // substation pinned at 1 pu²
        prog.add_constraint(Constraint::Fix {
            var: lay.w(topo.root, t),
            value: 1.0,
        });
        for i in 0..n {
            prog.add_constraint(Constraint::Box {
                var: lay.w(i, t),
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }

        // s_i = Σ over incident lines, real and imaginary rows
        let mut re: Vec<LinExpr> = (0..n).map(|i| LinExpr::var(lay.s(i, t).0).scaled(-1.0)).collect();
        let mut im: Vec<LinExpr> = (0..n).map(|i| LinExpr::var(lay.s(i, t).1).scaled(-1.0)).collect();
        for (l, line) in net.lines.iter().enumerate() {
            let (up, down, inv_a2) = lay.edge_ends[l];
            let (wr, wi) = lay.we(l, t);
            let (wu, wd) = (lay.w(up, t), lay.w(down, t));
            if let Some((fp, fq)) = lay.tie(l, t) {
                // ideal tie: V_down = a·V_up, flow f leaves `up` and reaches `down`
                re[up].add(fp, -1.0);
                im[up].add(fq, -1.0);
                re[down].add(fp, 1.0);
                im[down].add(fq, 1.0);
                prog.add_constraint(Constraint::Equality(LinExpr::var(wd).plus(wu, -1.0 / inv_a2)));
                prog.add_constraint(Constraint::Equality(LinExpr::var(wr).plus(wu, -1.0)));
                prog.add_constraint(Constraint::Fix { var: wi, value: 0.0 });
                continue;
            }
            let (g, b) = (line.admittance.re, line.admittance.im);
            // upstream side: (W − w_up)·conj(y)
            re[up].add_expr(&LinExpr::var(wr).plus(wu, -1.0), g);
            re[up].add(wi, b);
            im[up].add_expr(&LinExpr::var(wr).plus(wu, -1.0), -b);
            im[up].add(wi, g);
            // downstream side through the ideal ratio: (conj W − w_down/a²)·conj(y)
            re[down].add_expr(&LinExpr::var(wr).plus(wd, -inv_a2), g);
            re[down].add(wi, -b);
            im[down].add_expr(&LinExpr::var(wr).plus(wd, -inv_a2), -b);
            im[down].add(wi, -g);

            prog.add_constraint(Constraint::RotatedCone {
                u: LinExpr::var(wu),
                v: LinExpr::var(wd).scaled(inv_a2),
                z: vec![LinExpr::var(wr), LinExpr::var(wi)],
            });
            if p.loss_weight > 0.0 {
                // line loss g·|V_up − V_down/a|² = g(w_up + w_down/a² − 2 Re W)
                let loss = LinExpr::var(wu).plus(wd, inv_a2).plus(wr, -2.0);
                prog.add_term(Term::Linear {
                    expr: loss.scaled(p.loss_weight * g),
                });
            }
        }
        for i in 0..n {
            prog.add_constraint(Constraint::Equality(re[i].clone()));
            prog.add_constraint(Constraint::Equality(im[i].clone()));
        }

        // fixed and controllable injections
        for bus in &net.buses {
            let i = bus.id;
            if bus.is_substation {
                continue;
            }
            let (sp, sq) = lay.s(i, t);
            let q_cap = if bus.has_cap_bank { kw(bus.cap_bank_q) } else { 0.0 };
            let tan = bus.q_per_p();
            if bus.controllable {
                let k = controllable.iter().position(|&c| c == i).expect("controllable");
                let xv = lay.x(k, t);
                prog.add_constraint(Constraint::Equality(LinExpr::var(sp).plus(xv, -1.0)));
                prog.add_constraint(Constraint::Equality(LinExpr::var(sq).plus(xv, -tan).offset(q_cap)));
            } else {
                let m = kw(inp.forecasts[&i].mean[t]);
                prog.add_constraint(Constraint::Fix { var: sp, value: m });
                prog.add_constraint(Constraint::Fix {
                    var: sq,
                    value: tan * m - q_cap,
                });
            }
        }

        // voltage band penalty
        let (lo, hi) = p.vband;
        if p.lambda_v > 0.0 {
            for i in 0..n {
                if hi.is_finite() {
                    prog.add_term(Term::SquaredHinge {
                        weight: p.lambda_v,
                        expr: LinExpr::var(lay.w(i, t)).offset(-hi),
                    });
                }
                if lo.is_finite() {
                    prog.add_term(Term::SquaredHinge {
                        weight: p.lambda_v,
                        expr: LinExpr::var(lay.w(i, t)).scaled(-1.0).offset(lo),
                    });
                }
            }
        }

        // target projection and direction penalty
        for (k, &i) in controllable.iter().enumerate() {
            let tp = &inp.targets[&i];
            let target = match dir {
                Direction::Upper => tp.upper[t],
                Direction::Lower => tp.lower[t],
            };
            let xv = lay.x(k, t);
            prog.add_term(Term::Quadratic {
                weight: 1.0,
                expr: LinExpr::var(xv).offset(-kw(target)),
            });
            if p.lambda_d > 0.0 {
                // penalise bounds that cross the baseline: I_b·(p_base − x)
                let sg = dir.sign();
                prog.add_term(Term::LinearHinge {
                    weight: p.lambda_d,
                    expr: LinExpr::var(xv).scaled(-sg).offset(sg * kw(tp.base[t])),
                });
            }
        }
    }
    Ok((prog, lay))
}

pub fn extract_state(lay: &BoundLayout, sol: &Solution, n_buses: usize, n_lines: usize) -> RelaxedPfState {
    let t_len = lay.horizon;
    RelaxedPfState {
        w_diag: (0..n_buses)
            .map(|i| (0..t_len).map(|t| sol.value(lay.w(i, t))).collect())
            .collect(),
        w_edge: (0..n_lines)
            .map(|l| {
                (0..t_len)
                    .map(|t| {
                        let (a, b) = lay.we(l, t);
                        (sol.value(a), sol.value(b))
                    })
                    .collect()
            })
            .collect(),
        s: (0..n_buses)
            .map(|i| {
                (0..t_len)
                    .map(|t| {
                        let (a, b) = lay.s(i, t);
                        (sol.value(a), sol.value(b))
                    })
                    .collect()
            })
            .collect(),
        edge_ends: lay.edge_ends.clone(),
    }
}

#[derive(Debug, Clone)]
pub struct DirectionResult {
    pub state: RelaxedPfState,
    /// x per controllable node, kW.
    pub x: BTreeMap<usize, Vec<f64>>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub optimal: bool,
}

pub fn solve_direction(inp: &GcInputs, dir: Direction) -> Result<DirectionResult, GcError> {
    let (prog, lay) = build_bound_problem(inp, dir)?;
    let sol = prog
        .solve(inp.params.tol, inp.params.max_iter)
        .map_err(|source| GcError::Solve { direction: dir, source })?;
    if sol.status != Status::Optimal {
        log::warn!("{dir} bound solve stopped at kkt residual {:.2e}", sol.kkt_residual);
    }
    let x = lay
        .controllable
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let v = (0..lay.horizon).map(|t| inp.net.pu_to_kw(sol.value(lay.x(k, t)))).collect();
            (i, v)
        })
        .collect();
    Ok(DirectionResult {
        state: extract_state(&lay, &sol, inp.net.n_buses(), inp.net.lines.len()),
        x,
        objective: sol.objective_value,
        kkt_residual: sol.kkt_residual,
        optimal: sol.is_optimal(),
    })
}

#[derive(Debug, Clone)]
pub struct Schedule {
    pub bounds: BTreeMap<usize, DayAheadBounds>,
    pub upper: DirectionResult,
    pub lower: DirectionResult,
    /// (node, hour) pairs where the independent solves crossed.
    pub crossings: Vec<(usize, usize)>,
}

/// Solves both directions (concurrently) and reconciles crossed bounds by
/// setting both to their midpoint.
pub fn schedule_bounds(inp: &GcInputs) -> Result<Schedule, GcError> {
    let (up, lo) = rayon::join(
        || solve_direction(inp, Direction::Upper),
        || solve_direction(inp, Direction::Lower),
    );
    let (upper, lower) = (up?, lo?);
    let mut bounds = BTreeMap::new();
    let mut crossings = Vec::new();
    for (&i, xu) in &upper.x {
        let mut x_upper = xu.clone();
        let mut x_lower = lower.x[&i].clone();
        for t in 0..x_upper.len() {
            if x_upper[t] < x_lower[t] {
                let mid = 0.5 * (x_upper[t] + x_lower[t]);
                log::debug!(
                    "node {i} hour {t}: bounds crossed ({:.3} < {:.3}), using midpoint",
                    x_upper[t],
                    x_lower[t]
                );
                x_upper[t] = mid;
                x_lower[t] = mid;
                crossings.push((i, t));
            }
        }
        bounds.insert(
            i,
            DayAheadBounds {
                node: i,
                x_upper,
                x_lower,
            },
        );
    }
    Ok(Schedule {
        bounds,
        upper,
        lower,
        crossings,
    })
}

#[derive(Debug, Clone)]
pub struct Exactness {
    /// `|W|² − w_up·w_down/a²` per line and hour; never positive up to
    /// solver tolerance.
    pub residuals: Vec<Vec<f64>>,
    /// Largest |residual| / (w_up·w_down/a²).
    pub max_relative: f64,
    pub exact: bool,
}

pub const EXACTNESS_TOL: f64 = 1e-6;

pub fn check_exactness(sol: &RelaxedPfState) -> Exactness {
    let mut max_rel: f64 = 0.0;
    let residuals = sol
        .edge_ends
        .iter()
        .enumerate()
        .map(|(l, &(up, down, inv_a2))| {
            sol.w_edge[l]
                .iter()
                .enumerate()
                .map(|(t, &(re, im))| {
                    let prod = sol.w_diag[up][t] * sol.w_diag[down][t] * inv_a2;
                    let r = re * re + im * im - prod;
                    if prod > 0.0 {
                        max_rel = max_rel.max(r.abs() / prod);
                    }
                    r
                })
                .collect()
        })
        .collect();
    Exactness {
        residuals,
        max_relative: max_rel,
        exact: max_rel <= EXACTNESS_TOL,
    }
}

/// Voltage angles recovered from an exact relaxed state: walking from the
/// root, `∠V_down = ∠V_up − ∠W`.
pub fn recover_voltages(sol: &RelaxedPfState, topo: &Topology, hour: usize) -> Vec<num_complex::Complex64> {
    let n = sol.w_diag.len();
    let mut ang = vec![0.0; n];
    for &b in topo.order.iter().skip(1) {
        let l = topo.parent_line[b].expect("non-root bus has a parent");
        let (up, _, _) = sol.edge_ends[l];
        let (re, im) = sol.w_edge[l][hour];
        ang[b] = ang[up] - im.atan2(re);
    }
    (0..n)
        .map(|i| num_complex::Complex64::from_polar(sol.w_diag[i][hour].max(0.0).sqrt(), ang[i]))
        .collect()
}

pub fn write_bounds_csv<W: Write>(out: W, bounds: &BTreeMap<usize, DayAheadBounds>) -> Result<(), GcError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "hour", "x_lower_kw", "x_upper_kw"])?;
    for b in bounds.values() {
        for t in 0..b.x_upper.len() {
            w.write_record([
                b.node.to_string(),
                t.to_string(),
                format!("{:.6}", b.x_lower[t]),
                format!("{:.6}", b.x_upper[t]),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_bounds_csv<R: Read>(input: R) -> Result<BTreeMap<usize, DayAheadBounds>, GcError> {
    #[derive(Deserialize)]
    struct Row {
        node: usize,
        hour: usize,
        x_lower_kw: f64,
        x_upper_kw: f64,
    }
    let mut out: BTreeMap<usize, DayAheadBounds> = BTreeMap::new();
    for row in csv::Reader::from_reader(input).deserialize::<Row>() {
        let r = row?;
        let b = out.entry(r.node).or_insert_with(|| DayAheadBounds {
            node: r.node,
            x_upper: Vec::new(),
            x_lower: Vec::new(),
        });
        if b.x_upper.len() <= r.hour {
            b.x_upper.resize(r.hour + 1, f64::NAN);
            b.x_lower.resize(r.hour + 1, f64::NAN);
        }
        b.x_upper[r.hour] = r.x_upper_kw;
        b.x_lower[r.hour] = r.x_lower_kw;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, Line};
    use num_complex::Complex64;

    pub(crate) fn two_bus(z: Complex64) -> RadialNetwork {
        let mut sub = Bus::new(0);
        sub.is_substation = true;
        sub.controllable = false;
        let mut b1 = Bus::new(1);
        b1.controllable = true;
        b1.transformer_rating = Some(500.0);
        b1.load_power_factor = 1.0;
        RadialNetwork {
            buses: vec![sub, b1],
            lines: vec![Line::new(0, 1, z)],
            base_mva: 1.0,
            base_kv: 4.16,
            per_unit: true,
        }
    }

    fn target(upper: f64, lower: f64, base: f64) -> BTreeMap<usize, TargetPair> {
        BTreeMap::from([(
            1,
            TargetPair {
                node: 1,
                upper: vec![upper],
                lower: vec![lower],
                base: vec![base],
            },
        )])
    }

    fn inputs(net: &RadialNetwork, targets: BTreeMap<usize, TargetPair>) -> GcInputs<'_> {
        GcInputs {
            net,
            targets,
            forecasts: BTreeMap::new(),
            horizon: 1,
            taps: vec![0; net.lines.len()],
            params: GcParams::default(),
        }
    }

    #[test]
    fn two_bus_layout_counts() {
        let net = two_bus(Complex64::new(0.01, 0.02));
        let (prog, lay) = build_bound_problem(&inputs(&net, target(100.0, 50.0, 75.0)), Direction::Upper).unwrap();
        assert_eq!(lay.w.len, 2);
        assert_eq!(lay.w_edge.len, 2);
        assert_eq!(lay.s.len, 4);
        assert_eq!(lay.x.len, 1);
        assert_eq!(prog.count_cones(), 1);
        // 4 branch-flow rows + x = Re s + reactive tie
        let eqs = prog.constraints.iter().filter(|c| matches!(c, Constraint::Equality(_))).count();
        assert_eq!(eqs, 6);
    }

    #[test]
    fn directions_differ_only_in_hinge_sign() {
        let net = two_bus(Complex64::new(0.01, 0.02));
        let inp = inputs(&net, target(100.0, 100.0, 75.0));
        let (up, _) = build_bound_problem(&inp, Direction::Upper).unwrap();
        let (lo, _) = build_bound_problem(&inp, Direction::Lower).unwrap();
        assert_eq!(up.constraints, lo.constraints);
        let diff: Vec<_> = up.terms.iter().zip(&lo.terms).filter(|(a, b)| a != b).collect();
        assert_eq!(diff.len(), 1);
        match diff[0] {
            (Term::LinearHinge { expr: a, .. }, Term::LinearHinge { expr: b, .. }) => {
                assert_eq!(a.scaled(-1.0), *b);
            }
            other => panic!("unexpected difference {other:?}"),
        }
    }

    #[test]
    fn missing_target_reported() {
        let net = two_bus(Complex64::new(0.01, 0.02));
        let inp = inputs(&net, BTreeMap::new());
        assert!(matches!(build_bound_problem(&inp, Direction::Upper), Err(GcError::MissingTarget(1))));
    }

    #[test]
    fn feasible_targets_pass_through() {
        let net = two_bus(Complex64::new(0.01, 0.02));
        let sched = schedule_bounds(&inputs(&net, target(120.0, 40.0, 80.0))).unwrap();
        let b = &sched.bounds[&1];
        assert!((b.x_upper[0] - 120.0).abs() < 0.5, "{b:?}");
        assert!((b.x_lower[0] - 40.0).abs() < 0.5, "{b:?}");
        assert!(check_exactness(&sched.upper.state).exact);
    }

    #[test]
    fn ideal_tie_passes_targets() {
        let net = two_bus(Complex64::new(0.0, 0.0));
        let sched = schedule_bounds(&inputs(&net, target(300.0, -200.0, 0.0))).unwrap();
        let b = &sched.bounds[&1];
        assert!((b.x_upper[0] - 300.0).abs() < 1e-3);
        assert!((b.x_lower[0] + 200.0).abs() < 1e-3);
        let st = &sched.upper.state;
        assert!((st.w_diag[1][0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unloaded_network_is_flat() {
        let net = two_bus(Complex64::new(0.01, 0.02));
        let sched = schedule_bounds(&inputs(&net, target(0.0, 0.0, 0.0))).unwrap();
        let st = &sched.upper.state;
        assert!((st.w_diag[1][0] - 1.0).abs() < 1e-6);
        assert!(check_exactness(st).residuals[0][0].abs() < 1e-6);
    }

    #[test]
    fn bounds_csv_round_trip() {
        let b = BTreeMap::from([(
            3,
            DayAheadBounds {
                node: 3,
                x_upper: vec![2.0, 3.5],
                x_lower: vec![-1.0, 0.25],
            },
        )]);
        let mut buf = Vec::new();
        write_bounds_csv(&mut buf, &b).unwrap();
        assert_eq!(read_bounds_csv(buf.as_slice()).unwrap(), b);
    }
}
