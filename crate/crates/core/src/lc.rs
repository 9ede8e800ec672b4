//! Rolling-horizon local controller for one node's storage and EV sessions.
//!
//! Each hour the controller minimises energy cost (no export revenue), a
//! quadratic penalty on net consumption outside the day-ahead bounds, and a
//! throughput wear cost, then executes the first step.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::{Constraint, ConvexProgram, LinExpr, SolveError, Status, Term, VarBlock, TOL_SMALL};
use crate::scenario::{price_at, EvSession, Tariff};

#[derive(Debug, Error)]
pub enum LcError {
    #[error("node {node}: {msg}")]
    InvalidState { node: usize, msg: String },
    #[error("node {node}: EV session {session} cannot reach its final charge")]
    InfeasibleSession { node: usize, session: usize },
    #[error("node {node} hour {hour}: {source}")]
    Solve {
        node: usize,
        hour: usize,
        #[source]
        source: SolveError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    pub c_max: f64,
    pub d_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub gamma_l: f64,
    pub gamma_c: f64,
    pub gamma_d: f64,
    pub lambda_b: f64,
}

impl BatterySpec {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.c_max >= 0.0
            && self.d_max >= 0.0
            && self.q_min <= self.q_max
            && self.gamma_l > 0.0
            && self.gamma_l <= 1.0
            && self.gamma_c > 0.0
            && self.gamma_c <= 1.0
            && self.gamma_d >= 1.0
            && self.lambda_b >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(format!("invalid battery spec {self:?}"))
        }
    }

    /// State of charge after one hour at (c, d) from q.
    pub fn advance(&self, q: f64, c: f64, d: f64) -> f64 {
        self.gamma_l * q + self.gamma_c * c - self.gamma_d * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LcConfig {
    pub horizon: usize,
    pub lambda_bounds: f64,
    /// Wear cost applied to EV charging throughput.
    pub ev_lambda_b: f64,
    pub ev_gamma_c: f64,
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for LcConfig {
    fn default() -> Self {
        LcConfig {
            horizon: 48,
            lambda_bounds: 1e3,
            ev_lambda_b: 0.001,
            ev_gamma_c: 0.95,
            tol: TOL_SMALL,
            max_iter: 200,
        }
    }
}

impl LcConfig {
    pub fn ev_spec(&self, s: &EvSession, capacity: f64) -> BatterySpec {
        BatterySpec {
            c_max: s.c_max,
            d_max: 0.0,
            q_min: 0.0,
            q_max: capacity.max(s.q_final),
            gamma_l: 1.0,
            gamma_c: self.ev_gamma_c,
            gamma_d: 1.0,
            lambda_b: self.ev_lambda_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StorageUnit {
    pub spec: BatterySpec,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvUnit {
    pub session: EvSession,
    pub spec: BatterySpec,
    pub q: f64,
}

#[derive(Debug, Clone)]
pub struct LcState {
    pub node: usize,
    /// Absolute hour of the first horizon step.
    pub now: usize,
    pub storage: Vec<StorageUnit>,
    pub evs: Vec<EvUnit>,
    /// Uncontrolled net consumption over the horizon, kW.
    pub p_forecast: Vec<f64>,
    /// Bounds on net consumption; infinite entries disable the penalty.
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    pub tariff: Tariff,
    pub cfg: LcConfig,
}

impl LcState {
    pub fn new(node: usize, now: usize, tariff: Tariff, cfg: LcConfig) -> Self {
        let h = cfg.horizon;
        LcState {
            node,
            now,
            storage: Vec::new(),
            evs: Vec::new(),
            p_forecast: vec![0.0; h],
            x_lower: vec![f64::NEG_INFINITY; h],
            x_upper: vec![f64::INFINITY; h],
            tariff,
            cfg,
        }
    }

    pub fn horizon(&self) -> usize {
        self.p_forecast.len()
    }

    pub fn is_idle(&self) -> bool {
        self.storage.is_empty() && self.evs.is_empty()
    }

    pub fn validate(&self) -> Result<(), LcError> {
        let bad = |msg: String| LcError::InvalidState { node: self.node, msg };
        let h = self.horizon();
        if h == 0 || self.x_lower.len() != h || self.x_upper.len() != h {
            return Err(bad("horizon/bounds length mismatch".into()));
        }
        if self.p_forecast.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite forecast".into()));
        }
        for u in &self.storage {
            u.spec.validate().map_err(bad)?;
            if u.q < u.spec.q_min - 1e-9 || u.q > u.spec.q_max + 1e-9 {
                return Err(bad(format!("SOC {} outside [{}, {}]", u.q, u.spec.q_min, u.spec.q_max)));
            }
        }
        for e in &self.evs {
            e.spec.validate().map_err(bad)?;
            if e.spec.d_max != 0.0 {
                return Err(bad(format!("EV session {} can discharge", e.session.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitKind {
    Storage,
    Ev,
}

#[derive(Debug, Clone)]
pub struct UnitVars {
    pub kind: UnitKind,
    /// Storage index or session id.
    pub id: usize,
    pub c: VarBlock,
    pub d: Option<VarBlock>,
    pub q: VarBlock,
    /// Fixed charging rate when the session has no slack left: its need
    /// rate when that is exactly full power, `c_max` when it cannot finish.
    pub forced_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LcProblem {
    pub prog: ConvexProgram,
    pub units: Vec<UnitVars>,
    /// p̂_t = p_t + Σ(c − d) per horizon step.
    pub net: Vec<LinExpr>,
}

fn unit_blocks(
    prog: &mut ConvexProgram,
    tag: &str,
    spec: &BatterySpec,
    q0: f64,
    len: usize,
) -> (VarBlock, Option<VarBlock>, VarBlock) {
    let c = prog.add_block(format!("{tag}.c"), len);
    let d = (spec.d_max > 0.0).then(|| prog.add_block(format!("{tag}.d"), len));
    let q = prog.add_block(format!("{tag}.q"), len);
    for t in 0..len {
        prog.add_constraint(Constraint::Box {
            var: c.at(t),
            lo: 0.0,
            hi: spec.c_max,
        });
        if let Some(d) = &d {
            prog.add_constraint(Constraint::Box {
                var: d.at(t),
                lo: 0.0,
                hi: spec.d_max,
            });
        }
        prog.add_constraint(Constraint::Box {
            var: q.at(t),
            lo: spec.q_min,
            hi: spec.q_max,
        });
        // q_t − γ_l q_{t−1} − γ_c c_t + γ_d d_t = 0
        let mut dyn_ = LinExpr::var(q.at(t)).plus(c.at(t), -spec.gamma_c);
        if t == 0 {
            dyn_ = dyn_.offset(-spec.gamma_l * q0);
        } else {
            dyn_.add(q.at(t - 1), -spec.gamma_l);
        }
        if let Some(d) = &d {
            dyn_.add(d.at(t), spec.gamma_d);
        }
        prog.add_constraint(Constraint::Equality(dyn_));
        let mut wear = LinExpr::var(c.at(t)).scaled(spec.lambda_b);
        if let Some(d) = &d {
            wear.add(d.at(t), spec.lambda_b);
        }
        if spec.lambda_b > 0.0 {
            prog.add_term(Term::Linear { expr: wear });
        }
    }
    (c, d, q)
}

/// Whether an EV can still reach `q_final` in its remaining steps.
pub fn ev_reachable(e: &EvUnit, steps: usize) -> bool {
    let need = e.session.q_final - e.q;
    need <= e.spec.gamma_c * e.spec.c_max * steps as f64 + 1e-9
}

/// Charging rate for a session with no scheduling freedom left: the
/// remaining need is (within tolerance) either the full charging capacity
/// or zero, so the feasible set is a single point which is fixed directly
/// instead of being handed to the solver.
fn forced_ev_rate(e: &EvUnit, steps: usize) -> Option<f64> {
    let need = e.session.q_final - e.q;
    let full = e.spec.gamma_c * e.spec.c_max * steps as f64;
    if need >= full * (1.0 - 1e-7) || need <= full * 1e-7 {
        Some((need / (e.spec.gamma_c * steps as f64)).clamp(0.0, e.spec.c_max))
    } else {
        None
    }
}

pub fn build_lc_problem(st: &LcState) -> Result<LcProblem, LcError> {
    st.validate()?;
    let h = st.horizon();
    let mut prog = ConvexProgram::new();
    let mut units = Vec::new();
    let mut net: Vec<LinExpr> = st.p_forecast.iter().map(|&p| LinExpr::constant(p)).collect();

    for (k, u) in st.storage.iter().enumerate() {
        let (c, d, q) = unit_blocks(&mut prog, &format!("storage[{k}]"), &u.spec, u.q, h);
        for t in 0..h {
            net[t].add(c.at(t), 1.0);
            if let Some(d) = &d {
                net[t].add(d.at(t), -1.0);
            }
        }
        units.push(UnitVars {
            kind: UnitKind::Storage,
            id: k,
            c,
            d,
            q,
            forced_rate: None,
        });
    }
    for e in &st.evs {
        let s = &e.session;
        if s.depart <= st.now {
            continue;
        }
        let remaining = s.depart - st.now;
        let len = remaining.min(h);
        let (c, _, q) = unit_blocks(&mut prog, &format!("ev[{}]", s.id), &e.spec, e.q, len);
        let forced_rate = forced_ev_rate(e, remaining);
        if let Some(rate) = forced_rate {
            for t in 0..len {
                prog.add_constraint(Constraint::Fix { var: c.at(t), value: rate });
            }
            // the capacity box would otherwise make the forced plan infeasible
            prog.constraints.retain(|con| !matches!(con, Constraint::Box { var, .. } if q.indices().contains(var)));
        } else if remaining <= h {
            prog.add_constraint(Constraint::Fix {
                var: q.at(len - 1),
                value: s.q_final,
            });
        }
        for t in 0..len {
            net[t].add(c.at(t), 1.0);
        }
        units.push(UnitVars {
            kind: UnitKind::Ev,
            id: s.id,
            c,
            d: None,
            q,
            forced_rate,
        });
    }

    let lam = st.cfg.lambda_bounds;
    for t in 0..h {
        let price = price_at(&st.tariff, st.now + t);
        prog.add_term(Term::LinearHinge {
            weight: price,
            expr: net[t].clone(),
        });
        if st.x_upper[t].is_finite() && lam > 0.0 {
            prog.add_term(Term::SquaredHinge {
                weight: lam,
                expr: net[t].clone().offset(-st.x_upper[t]),
            });
        }
        if st.x_lower[t].is_finite() && lam > 0.0 {
            prog.add_term(Term::SquaredHinge {
                weight: lam,
                expr: net[t].scaled(-1.0).offset(st.x_lower[t]),
            });
        }
    }
    Ok(LcProblem { prog, units, net })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitPlan {
    pub kind: UnitKind,
    pub id: usize,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub q: Vec<f64>,
    /// SOC before and after the executed step.
    pub q_start: f64,
    pub q_next: f64,
    pub forced: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub node: usize,
    pub hour: usize,
    pub units: Vec<UnitPlan>,
    /// Executed (c, d) of each unit in the first step, kW.
    pub executed: Vec<(f64, f64)>,
    pub objective: f64,
    pub optimal: bool,
    pub solve_seconds: f64,
}

impl DispatchPlan {
    fn empty(node: usize, hour: usize) -> Self {
        DispatchPlan {
            node,
            hour,
            units: Vec::new(),
            executed: Vec::new(),
            objective: 0.0,
            optimal: true,
            solve_seconds: 0.0,
        }
    }

    /// Executed battery (storage only) and EV power in the first step, kW.
    pub fn executed_split(&self) -> (f64, f64) {
        let mut bat = 0.0;
        let mut ev = 0.0;
        for (u, (c, d)) in self.units.iter().zip(&self.executed) {
            match u.kind {
                UnitKind::Storage => bat += c - d,
                UnitKind::Ev => ev += c - d,
            }
        }
        (bat, ev)
    }
}

/// p_t + Σ_k (c_t − d_t) for horizon step `t` of a plan.
pub fn net_power(st: &LcState, plan: &DispatchPlan, t: usize) -> f64 {
    let mut p = st.p_forecast[t];
    for u in &plan.units {
        if t < u.c.len() {
            p += u.c[t] - u.d.get(t).copied().unwrap_or(0.0);
        }
    }
    p
}

/// Clamps the first-step action to the unit's boxes and SOC range so the
/// executed replay `q' = γ_l q + γ_c c − γ_d d` stays feasible.
fn feasible_action(spec: &BatterySpec, q: f64, c: f64, d: f64) -> (f64, f64) {
    let mut c = c.clamp(0.0, spec.c_max);
    let mut d = d.clamp(0.0, spec.d_max);
    let q1 = spec.advance(q, c, d);
    if q1 > spec.q_max {
        c = (c - (q1 - spec.q_max) / spec.gamma_c).max(0.0);
    } else if q1 < spec.q_min {
        d = (d - (spec.q_min - q1) / spec.gamma_d).max(0.0);
    }
    (c, d)
}

/// Solves the horizon problem, executes the first hour and advances the
/// state by one hour. Sessions that depart are dropped from the new state.
pub fn step_lc(st: &LcState) -> Result<(DispatchPlan, LcState), LcError> {
    if st.is_idle() {
        let mut next = st.clone();
        next.now += 1;
        shift(&mut next);
        return Ok((DispatchPlan::empty(st.node, st.now), next));
    }
    let problem = build_lc_problem(st)?;
    let started = Instant::now();
    let sol = problem
        .prog
        .solve(st.cfg.tol, st.cfg.max_iter)
        .map_err(|source| LcError::Solve {
            node: st.node,
            hour: st.now,
            source,
        })?;
    let solve_seconds = started.elapsed().as_secs_f64();
    if sol.status != Status::Optimal {
        log::warn!(
            "node {} hour {}: LC stopped at kkt residual {:.2e}",
            st.node,
            st.now,
            sol.kkt_residual
        );
    }

    let mut plan = DispatchPlan {
        node: st.node,
        hour: st.now,
        units: Vec::with_capacity(problem.units.len()),
        executed: Vec::with_capacity(problem.units.len()),
        objective: sol.objective_value,
        optimal: sol.is_optimal(),
        solve_seconds,
    };
    let mut next = st.clone();
    next.now += 1;
    let mut ev_iter = 0;
    for uv in &problem.units {
        let c = sol.block(&uv.c).to_vec();
        let d = uv.d.as_ref().map(|b| sol.block(b).to_vec()).unwrap_or_else(|| vec![0.0; c.len()]);
        let q = sol.block(&uv.q).to_vec();
        let (spec, q_start) = match uv.kind {
            UnitKind::Storage => (st.storage[uv.id].spec, st.storage[uv.id].q),
            UnitKind::Ev => {
                // units were pushed in session order, skipping departed ones
                while st.evs[ev_iter].session.id != uv.id {
                    ev_iter += 1;
                }
                (st.evs[ev_iter].spec, st.evs[ev_iter].q)
            }
        };
        let (mut c0, d0) = if let Some(rate) = uv.forced_rate {
            (rate, 0.0)
        } else {
            feasible_action(&spec, q_start, c[0], d[0])
        };
        if uv.kind == UnitKind::Ev && uv.forced_rate.is_none() {
            let e = &st.evs[ev_iter];
            if e.session.depart == st.now + 1 {
                // last hour: execute the terminal condition exactly
                let exact = (e.session.q_final - spec.gamma_l * q_start) / spec.gamma_c;
                if (exact - c0).abs() <= 1e-5 * spec.c_max.max(1.0) && exact >= 0.0 {
                    c0 = exact.min(spec.c_max);
                }
            }
        }
        let q1 = spec.advance(q_start, c0, d0);
        match uv.kind {
            UnitKind::Storage => next.storage[uv.id].q = q1,
            UnitKind::Ev => next.evs[ev_iter].q = q1,
        }
        plan.executed.push((c0, d0));
        plan.units.push(UnitPlan {
            kind: uv.kind,
            id: uv.id,
            c,
            d,
            q,
            q_start,
            q_next: q1,
            forced: uv.forced_rate.is_some(),
        });
    }
    next.evs.retain(|e| e.session.depart > next.now);
    shift(&mut next);
    Ok((plan, next))
}

fn shift(st: &mut LcState) {
    for v in [&mut st.p_forecast, &mut st.x_lower, &mut st.x_upper] {
        if v.len() > 1 {
            v.rotate_left(1);
        }
    }
}

/// Writes `node,hour,unit,c_kw,d_kw,q_kwh,net_kw` rows for executed steps.
pub fn write_dispatch_rows<W: Write>(
    w: &mut csv::Writer<W>,
    plan: &DispatchPlan,
    net_kw: f64,
) -> csv::Result<()> {
    for (u, (c, d)) in plan.units.iter().zip(&plan.executed) {
        let unit = match u.kind {
            UnitKind::Storage => format!("storage{}", u.id),
            UnitKind::Ev => format!("ev{}", u.id),
        };
        let q = u.q.first().copied().unwrap_or(u.q_start);
        w.write_record([
            plan.node.to_string(),
            plan.hour.to_string(),
            unit,
            format!("{c:.6}"),
            format!("{d:.6}"),
            format!("{q:.6}"),
            format!("{net_kw:.6}"),
        ])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn battery(q_max: f64, p: f64, lossless: bool) -> BatterySpec {
        BatterySpec {
            c_max: p,
            d_max: p,
            q_min: 0.0,
            q_max,
            gamma_l: if lossless { 1.0 } else { 0.9996 },
            gamma_c: if lossless { 1.0 } else { 0.95 },
            gamma_d: if lossless { 1.0 } else { 1.0 / 0.95 },
            lambda_b: 0.001,
        }
    }

    fn state(now: usize, p: Vec<f64>, tariff: Tariff) -> LcState {
        let cfg = LcConfig {
            horizon: p.len(),
            ..LcConfig::default()
        };
        let mut st = LcState::new(1, now, tariff, cfg);
        st.p_forecast = p;
        st
    }

    #[test]
    fn idle_node_has_empty_plan() {
        let st = state(0, vec![3.0; 48], Tariff::default());
        let (plan, next) = step_lc(&st).unwrap();
        assert!(plan.units.is_empty());
        assert_eq!(next.now, 1);
        let pr = build_lc_problem(&st).unwrap();
        let fixed: f64 = (0..48).map(|t| 3.0 * price_at(&st.tariff, t)).sum();
        assert!((pr.prog.objective(&[]) - fixed).abs() < 1e-9);
    }

    #[test]
    fn flat_price_battery_stays_idle() {
        let mut st = state(0, vec![3.0; 48], Tariff::flat(0.3));
        st.storage.push(StorageUnit {
            spec: battery(10.0, 2.5, false),
            q: 0.0,
        });
        let (plan, _) = step_lc(&st).unwrap();
        let u = &plan.units[0];
        assert!(u.c.iter().chain(&u.d).all(|v| v.abs() < 1e-5), "{:?}", u);
    }

    #[test]
    fn net_power_examples() {
        let st = state(0, vec![5.0, -3.0], Tariff::default());
        let plan = |c: f64, d: f64| DispatchPlan {
            units: vec![UnitPlan {
                kind: UnitKind::Storage,
                id: 0,
                c: vec![c, 0.0],
                d: vec![d, 0.0],
                q: vec![0.0; 2],
                q_start: 0.0,
                q_next: 0.0,
                forced: false,
            }],
            ..DispatchPlan::empty(1, 0)
        };
        assert_eq!(net_power(&st, &plan(2.0, 0.0), 0), 7.0);
        assert_eq!(net_power(&st, &plan(0.0, 5.0), 0), 0.0);
        assert_eq!(net_power(&st, &DispatchPlan::empty(1, 0), 1), -3.0);
    }

    #[test]
    fn minimum_window_ev_charges_flat_out() {
        let mut st = state(10, vec![1.0; 48], Tariff::default());
        let session = EvSession {
            id: 7,
            node: 1,
            home: 1,
            arrival: 10,
            depart: 14,
            q_init: 10.0,
            q_final: 10.0 + 4.0 * 6.0 * 0.95,
            c_max: 6.0,
            is_fast: false,
        };
        let spec = st.cfg.ev_spec(&session, 60.0);
        st.evs.push(EvUnit {
            session,
            spec,
            q: 10.0,
        });
        let mut cur = st;
        for _ in 0..4 {
            let (plan, next) = step_lc(&cur).unwrap();
            assert!((plan.executed[0].0 - 6.0).abs() < 1e-5);
            cur = next;
        }
        assert!(cur.evs.is_empty());
    }

    #[test]
    fn soft_bounds_keep_plan_feasible() {
        let mut st = state(0, vec![8.0; 24], Tariff::default());
        st.x_upper = vec![2.0; 24];
        st.x_lower = vec![0.0; 24];
        let pr = build_lc_problem(&st).unwrap();
        let x: Vec<f64> = vec![];
        assert!(pr.prog.objective(&x) > 1e3 * 36.0 * 24.0 - 1e-6);
        let (plan, _) = step_lc(&st).unwrap();
        assert!(plan.units.is_empty());
    }
}
