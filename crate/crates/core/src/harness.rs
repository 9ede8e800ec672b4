//! Daily simulation loop, benchmark modes and reliability metrics.
//!
//! Each metered day: bounds are fixed for the day (none, static ratings or
//! the scheduler's output), then every hour each node's controller acts,
//! realised injections go through the power flow, and metrics accumulate.
//! During the warm-up days controllers run without bounds; those days only
//! build forecast history and regulator state and are not metered.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::{build_targets, forecast_day_ahead, forecast_solar, Forecast, ForecastError, TargetPair};
use crate::gc::{check_exactness, schedule_bounds, DayAheadBounds, GcError, GcInputs, GcParams};
use crate::grid::RadialNetwork;
use crate::lc::{step_lc, EvUnit, LcConfig, LcError, LcState, StorageUnit, UnitKind};
use crate::powerflow::{run_power_flow, update_regulator_taps, PfCase, PowerFlowError};
use crate::scenario::{
    assign_fast_stations, default_start, house_counts, largest_nodes, place_ders, price_at, sample_ev_sessions,
    synth_loads, synth_solar, EvSession, GmmConfig, LoadConfig, Penetrations, Placement, ScenarioError,
    StorageTemplate, Tariff, Timeseries,
};

/// Transformer violations above this many kW are counted separately.
pub const VIOLATION_THRESHOLD_KW: f64 = 4.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("day {day}: {source}")]
    Forecast {
        day: usize,
        #[source]
        source: ForecastError,
    },
    #[error("day {day}: {source}")]
    Schedule {
        day: usize,
        #[source]
        source: GcError,
    },
    #[error("day {day} hour {hour}: {source}")]
    Control {
        day: usize,
        hour: usize,
        #[source]
        source: LcError,
    },
    #[error("day {day} hour {hour}: {source}")]
    PowerFlow {
        day: usize,
        hour: usize,
        #[source]
        source: PowerFlowError,
    },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NoBounds,
    StaticBounds,
    DynamicBounds,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::NoBounds, Mode::StaticBounds, Mode::DynamicBounds];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NoBounds => "no_bounds",
            Mode::StaticBounds => "static_bounds",
            Mode::DynamicBounds => "dynamic_bounds",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no_bounds" | "none" => Ok(Mode::NoBounds),
            "static_bounds" | "static" => Ok(Mode::StaticBounds),
            "dynamic_bounds" | "dynamic" => Ok(Mode::DynamicBounds),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Metered days, after the warm-up.
    pub days: usize,
    pub warmup_days: usize,
    pub penetrations: Penetrations,
    pub seed: u64,
    pub load: LoadConfig,
    pub gmm: GmmConfig,
    pub tariff: Tariff,
    pub storage: StorageTemplate,
    pub gc: GcParams,
    pub lc: LcConfig,
    /// Default transformer rating as a multiple of the bus's peak load.
    pub rating_multiplier: f64,
    /// Scales forecast error std before target construction.
    pub sigma_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::DynamicBounds,
            days: 7,
            warmup_days: 7,
            penetrations: Penetrations {
                solar: 50.0,
                storage: 10.0,
                ev: 50.0,
            },
            seed: 42,
            load: LoadConfig::default(),
            gmm: GmmConfig::default(),
            tariff: Tariff::default(),
            storage: StorageTemplate::default(),
            gc: GcParams::default(),
            lc: LcConfig::default(),
            rating_multiplier: 1.5,
            sigma_scale: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.days == 0 {
            return Err(HarnessError::Config("days must be at least 1".into()));
        }
        if self.warmup_days < crate::forecast::PERSISTENCE_DAYS {
            return Err(HarnessError::Config(format!(
                "warmup_days must be at least {}",
                crate::forecast::PERSISTENCE_DAYS
            )));
        }
        self.penetrations.validate()?;
        self.gmm.validate()?;
        self.gc.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.rating_multiplier > 0.0) || !(self.sigma_scale >= 0.0) {
            return Err(HarnessError::Config("rating_multiplier > 0 and sigma_scale >= 0 required".into()));
        }
        Ok(())
    }

    pub fn total_days(&self) -> usize {
        self.warmup_days + self.days
    }
}

/// Uncontrolled inputs shared by all modes of a paired comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Network with default ratings filled in.
    pub net: RadialNetwork,
    pub houses: Vec<usize>,
    /// Baseline demand per bus (index = bus id).
    pub loads: Vec<Timeseries>,
    /// Solar output per bus, kW; zero where none is installed.
    pub solar: Vec<Vec<f64>>,
    pub placement: Placement,
    pub sessions: Vec<EvSession>,
    pub gmm: GmmConfig,
    pub warmup_days: usize,
    pub days: usize,
}

impl Scenario {
    pub fn hours(&self) -> usize {
        (self.warmup_days + self.days) * 24
    }

    /// Uncontrolled net consumption (demand − solar) at bus `i`, hour `h`.
    pub fn base_net(&self, i: usize, h: usize) -> f64 {
        self.loads[i].values[h] - self.solar[i][h]
    }
}

pub fn build_scenario(net: &RadialNetwork, cfg: &RunConfig) -> Result<Scenario, HarnessError> {
    cfg.validate()?;
    let total = cfg.total_days();
    let start = default_start();
    let houses = house_counts(net, &cfg.load);
    let loads = synth_loads(net, &houses, &cfg.load, total, start, cfg.seed);
    let mut net = net.clone();
    let peaks: Vec<f64> = loads.iter().map(|t| t.peak()).collect();
    net.fill_default_ratings(&peaks, cfg.rating_multiplier);

    let placement = place_ders(&net, &loads, &houses, cfg.penetrations, &cfg.storage, cfg.seed)?;
    let mut solar = vec![vec![0.0; total * 24]; net.n_buses()];
    for ts in synth_solar(&placement, total, cfg.load.cloud_range, start, cfg.seed) {
        solar[ts.node_id] = ts.values;
    }

    let mut gmm = cfg.gmm.clone();
    if gmm.fast_station_nodes.is_empty() {
        let candidates: Vec<Timeseries> = loads
            .iter()
            .filter(|t| !net.buses[t.node_id].is_substation)
            .cloned()
            .collect();
        gmm.fast_station_nodes = largest_nodes(&candidates, 4);
    }
    let homes = placement.ev_homes();
    let mut sessions = Vec::new();
    for d in 0..total {
        sessions.extend(sample_ev_sessions(&gmm, &homes, d, cfg.seed)?);
    }
    let sessions = if sessions.is_empty() {
        sessions
    } else {
        assign_fast_stations(sessions, &gmm)?
    };
    Ok(Scenario {
        net,
        houses,
        loads,
        solar,
        placement,
        sessions,
        gmm,
        warmup_days: cfg.warmup_days,
        days: cfg.days,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BusMetrics {
    pub bus: usize,
    pub voltage_dev: f64,
    pub transformer_dev: f64,
    pub max_violation_kw: f64,
    pub arbitrage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Mode,
    pub penetrations: Penetrations,
    pub voltage_dev: f64,
    pub transformer_dev: f64,
    pub arbitrage: f64,
    pub per_bus: Vec<BusMetrics>,
}

impl MetricsReport {
    fn from_buses(mode: Mode, penetrations: Penetrations, per_bus: Vec<BusMetrics>) -> Self {
        MetricsReport {
            mode,
            penetrations,
            voltage_dev: per_bus.iter().map(|b| b.voltage_dev).sum(),
            transformer_dev: per_bus.iter().map(|b| b.transformer_dev).sum(),
            arbitrage: per_bus.iter().map(|b| b.arbitrage).sum(),
            per_bus,
        }
    }
}

/// Σ over samples of ([|v|² − hi]_+ + [lo − |v|²]_+)², band given in pu².
pub fn metric_voltage_deviation(v_mag: &[f64], band: (f64, f64)) -> f64 {
    v_mag
        .iter()
        .map(|v| {
            let w = v * v;
            ((w - band.1).max(0.0) + (band.0 - w).max(0.0)).powi(2)
        })
        .sum()
}

/// Σ ([|P| − rating]_+)² over samples, kW².
pub fn metric_transformer_violation(net_kw: &[f64], rating: f64) -> f64 {
    net_kw.iter().map(|p| (p.abs() - rating).max(0.0).powi(2)).sum()
}

/// Energy cost without storage minus energy cost with storage, both with
/// no export revenue. Inputs are per-hour kW with and without the battery.
pub fn metric_arbitrage(without_kw: &[f64], with_kw: &[f64], prices: &[f64]) -> f64 {
    without_kw
        .iter()
        .zip(with_kw)
        .zip(prices)
        .map(|((a, b), p)| p * (a.max(0.0) - b.max(0.0)))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub hour: usize,
    pub bus: usize,
    pub v_pu: f64,
    pub load_kw: f64,
    pub solar_kw: f64,
    pub ev_kw: f64,
    pub battery_kw: f64,
    pub net_kw: f64,
    pub x_lower_kw: f64,
    pub x_upper_kw: f64,
}

/// One executed storage or EV step, for replay checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocRecord {
    pub hour: usize,
    pub node: usize,
    pub kind: UnitKind,
    pub id: usize,
    pub q_before: f64,
    pub c: f64,
    pub d: f64,
    pub q_after: f64,
    pub gamma_l: f64,
    pub gamma_c: f64,
    pub gamma_d: f64,
    pub c_max: f64,
    pub d_max: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LcStats {
    pub solve_seconds: Vec<f64>,
    pub soc_log: Vec<SocRecord>,
    /// (session id, |q_end − q_final|) for sessions that departed.
    pub ev_final_errors: Vec<(usize, f64)>,
    pub non_optimal_solves: usize,
}

impl LcStats {
    pub fn median_solve_seconds(&self) -> f64 {
        if self.solve_seconds.is_empty() {
            return 0.0;
        }
        let mut v = self.solve_seconds.clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    /// Largest min(c, d)/max(c_max, d_max) over executed storage steps.
    pub fn max_simultaneous(&self) -> f64 {
        self.soc_log
            .iter()
            .filter(|r| r.d_max > 0.0)
            .map(|r| r.c.min(r.d) / r.c_max.max(r.d_max))
            .fold(0.0, f64::max)
    }

    /// Largest |q_after − (γ_l q + γ_c c − γ_d d)| over the log.
    pub fn max_replay_residual(&self) -> f64 {
        self.soc_log
            .iter()
            .map(|r| (r.q_after - (r.gamma_l * r.q_before + r.gamma_c * r.c - r.gamma_d * r.d)).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: MetricsReport,
    pub audit: Vec<AuditRow>,
    pub lc: LcStats,
    /// Bounds used each metered day.
    pub bounds: Vec<BTreeMap<usize, DayAheadBounds>>,
    /// Largest relative cone residual per metered day (dynamic mode).
    pub exactness: Vec<f64>,
    pub crossings: usize,
    pub final_taps: Vec<i32>,
}

/// Day-ahead bounds source for one metered day.
pub trait BoundSource {
    fn bounds(&self, day: usize, hist: &History, taps: &[i32]) -> Result<BTreeMap<usize, DayAheadBounds>, HarnessError>;
}

/// Realised history visible to forecasters.
#[derive(Debug, Clone)]
pub struct History {
    /// Demand per bus including EV and battery action, kW (solar excluded).
    pub demand: Vec<Vec<f64>>,
    pub solar: Vec<Vec<f64>>,
    /// Hours recorded so far.
    pub hours: usize,
}

fn constant_bounds(net: &RadialNetwork, lo: impl Fn(usize) -> f64, hi: impl Fn(usize) -> f64) -> BTreeMap<usize, DayAheadBounds> {
    net.controllable()
        .into_iter()
        .map(|i| {
            (
                i,
                DayAheadBounds {
                    node: i,
                    x_upper: vec![hi(i); 24],
                    x_lower: vec![lo(i); 24],
                },
            )
        })
        .collect()
}

pub struct NoBounds<'a>(pub &'a RadialNetwork);

impl BoundSource for NoBounds<'_> {
    fn bounds(&self, _: usize, _: &History, _: &[i32]) -> Result<BTreeMap<usize, DayAheadBounds>, HarnessError> {
        Ok(constant_bounds(self.0, |_| f64::NEG_INFINITY, |_| f64::INFINITY))
    }
}

pub struct StaticBounds<'a>(pub &'a RadialNetwork);

impl BoundSource for StaticBounds<'_> {
    fn bounds(&self, _: usize, _: &History, _: &[i32]) -> Result<BTreeMap<usize, DayAheadBounds>, HarnessError> {
        let net = self.0;
        Ok(constant_bounds(net, |i| -net.rating(i), |i| net.rating(i)))
    }
}

pub struct DynamicBounds<'a> {
    pub scn: &'a Scenario,
    pub params: GcParams,
    pub sigma_scale: f64,
    /// Filled with the largest relative cone residual of each solve.
    pub exactness: std::sync::Mutex<Vec<f64>>,
    pub crossings: std::sync::Mutex<usize>,
}

impl<'a> DynamicBounds<'a> {
    pub fn new(scn: &'a Scenario, params: GcParams, sigma_scale: f64) -> Self {
        DynamicBounds {
            scn,
            params,
            sigma_scale,
            exactness: Default::default(),
            crossings: Default::default(),
        }
    }

    /// Targets and fixed forecasts for the day following `hist`.
    pub fn day_inputs(
        &self,
        day: usize,
        hist: &History,
    ) -> Result<(BTreeMap<usize, TargetPair>, BTreeMap<usize, Forecast>), HarnessError> {
        let net = &self.scn.net;
        let mut targets = BTreeMap::new();
        let mut forecasts = BTreeMap::new();
        let start = default_start();
        for b in &net.buses {
            if b.is_substation {
                continue;
            }
            let i = b.id;
            let ts = Timeseries {
                node_id: i,
                start,
                values: hist.demand[i][..hist.hours].to_vec(),
            };
            let mut fc = forecast_day_ahead(&ts, b.load_power_factor)
                .map_err(|source| HarnessError::Forecast { day, source })?;
            for s in fc.error_std.iter_mut() {
                *s *= self.sigma_scale;
            }
            let cap = self.scn.placement.solar_nodes.get(&i).copied().unwrap_or(0.0);
            let solar_fc = if cap > 0.0 {
                forecast_solar(&hist.solar[i][..hist.hours], cap)
            } else {
                vec![0.0; 24]
            };
            if b.controllable {
                let tp = build_targets(&fc, &solar_fc, net.rating(i))
                    .map_err(|source| HarnessError::Forecast { day, source })?;
                targets.insert(i, tp);
            } else {
                for (m, s) in fc.mean.iter_mut().zip(&solar_fc) {
                    *m -= s;
                }
                forecasts.insert(i, fc);
            }
        }
        Ok((targets, forecasts))
    }
}

impl BoundSource for DynamicBounds<'_> {
    fn bounds(&self, day: usize, hist: &History, taps: &[i32]) -> Result<BTreeMap<usize, DayAheadBounds>, HarnessError> {
        let (targets, forecasts) = self.day_inputs(day, hist)?;
        let inp = GcInputs {
            net: &self.scn.net,
            targets,
            forecasts,
            horizon: 24,
            taps: taps.to_vec(),
            params: self.params,
        };
        let sched = schedule_bounds(&inp).map_err(|source| HarnessError::Schedule { day, source })?;
        let ex = check_exactness(&sched.upper.state)
            .max_relative
            .max(check_exactness(&sched.lower.state).max_relative);
        self.exactness.lock().expect("lock").push(ex);
        log::info!(
            "day {day}: bounds scheduled (cone residual {ex:.2e}, {} crossings)",
            sched.crossings.len()
        );
        Ok(sched.bounds)
    }
}

/// Runs one mode of a scenario.
pub fn run_scenario(scn: &Scenario, cfg: &RunConfig) -> Result<RunResult, HarnessError> {
    match cfg.mode {
        Mode::NoBounds => simulate(scn, cfg, &NoBounds(&scn.net)),
        Mode::StaticBounds => simulate(scn, cfg, &StaticBounds(&scn.net)),
        Mode::DynamicBounds => {
            let src = DynamicBounds::new(scn, cfg.gc, cfg.sigma_scale);
            let mut res = simulate(scn, cfg, &src)?;
            res.exactness = src.exactness.into_inner().expect("lock");
            res.crossings = src.crossings.into_inner().expect("lock");
            Ok(res)
        }
    }
}

pub fn simulate<B: BoundSource>(scn: &Scenario, cfg: &RunConfig, src: &B) -> Result<RunResult, HarnessError> {
    let net = &scn.net;
    let n = net.n_buses();
    let total_hours = scn.hours();
    let horizon = cfg.lc.horizon;

    let mut hist = History {
        demand: vec![vec![0.0; total_hours]; n],
        solar: scn.solar.clone(),
        hours: 0,
    };
    let mut ev_q: BTreeMap<usize, f64> = BTreeMap::new();
    let mut by_arrival: Vec<&EvSession> = scn.sessions.iter().collect();
    by_arrival.sort_by_key(|s| (s.arrival, s.id));

    let mut storage: BTreeMap<usize, StorageUnit> = scn
        .placement
        .storage_nodes
        .iter()
        .map(|(&i, spec)| {
            (
                i,
                StorageUnit {
                    spec: *spec,
                    q: spec.q_min + cfg.storage.initial_soc * (spec.q_max - spec.q_min),
                },
            )
        })
        .collect();
    let mut taps = vec![0i32; net.lines.len()];
    let mut per_bus: Vec<BusMetrics> = (0..n)
        .map(|bus| BusMetrics {
            bus,
            ..BusMetrics::default()
        })
        .collect();
    let mut audit = Vec::with_capacity(scn.days * 24 * n);
    let mut stats = LcStats::default();
    let mut all_bounds = Vec::new();
    let band = cfg.gc.vband;

    for day in 0..scn.warmup_days + scn.days {
        let metered = day >= scn.warmup_days;
        let bounds = if metered {
            src.bounds(day, &hist, &taps)?
        } else {
            NoBounds(net).bounds(day, &hist, &taps)?
        };
        for h in 0..24 {
            let hour = day * 24 + h;
            // controller states for nodes with storage or plugged-in EVs
            let mut states: Vec<LcState> = Vec::new();
            let mut active: BTreeMap<usize, Vec<&EvSession>> = BTreeMap::new();
            for s in by_arrival.iter().filter(|s| s.is_active(hour)) {
                active.entry(s.node).or_default().push(s);
            }
            for i in 0..n {
                let bat = storage.get(&i);
                let evs = active.get(&i);
                if bat.is_none() && evs.is_none() {
                    continue;
                }
                let mut st = LcState::new(i, hour, cfg.tariff, cfg.lc);
                // realised value now, same hour on the latest past day after
                st.p_forecast = (0..horizon)
                    .map(|t| {
                        let back = 24 * t.div_ceil(24);
                        let idx = (hour + t).checked_sub(back).unwrap_or((hour + t) % 24);
                        scn.base_net(i, idx)
                    })
                    .collect();
                if let Some(b) = bounds.get(&i) {
                    st.x_lower = (0..horizon).map(|t| b.x_lower[(h + t) % 24]).collect();
                    st.x_upper = (0..horizon).map(|t| b.x_upper[(h + t) % 24]).collect();
                }
                if let Some(u) = bat {
                    st.storage.push(u.clone());
                }
                for s in evs.into_iter().flatten() {
                    let q = *ev_q.get(&s.id).unwrap_or(&s.q_init);
                    st.evs.push(EvUnit {
                        session: (*s).clone(),
                        spec: cfg.lc.ev_spec(s, scn.gmm.ev_battery_kwh),
                        q,
                    });
                }
                states.push(st);
            }
            let plans = states
                .par_iter()
                .map(step_lc)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|source| HarnessError::Control { day, hour: h, source })?;

            let mut ev_kw = vec![0.0; n];
            let mut bat_kw = vec![0.0; n];
            for (st, (plan, _)) in states.iter().zip(&plans) {
                let i = st.node;
                if metered {
                    stats.solve_seconds.push(plan.solve_seconds);
                    if !plan.optimal {
                        stats.non_optimal_solves += 1;
                    }
                }
                let mut ev_idx = 0;
                for (u, &(c, d)) in plan.units.iter().zip(&plan.executed) {
                    let spec = match u.kind {
                        UnitKind::Storage => {
                            bat_kw[i] += c - d;
                            let unit = storage.get_mut(&i).expect("storage unit");
                            unit.q = u.q_next;
                            unit.spec
                        }
                        UnitKind::Ev => {
                            ev_kw[i] += c;
                            while st.evs[ev_idx].session.id != u.id {
                                ev_idx += 1;
                            }
                            let e = &st.evs[ev_idx];
                            ev_q.insert(u.id, u.q_next);
                            if metered && e.session.depart == hour + 1 {
                                stats.ev_final_errors.push((u.id, (u.q_next - e.session.q_final).abs()));
                            }
                            e.spec
                        }
                    };
                    if !metered {
                        continue;
                    }
                    stats.soc_log.push(SocRecord {
                        hour,
                        node: i,
                        kind: u.kind,
                        id: u.id,
                        q_before: u.q_start,
                        c,
                        d,
                        q_after: u.q_next,
                        gamma_l: spec.gamma_l,
                        gamma_c: spec.gamma_c,
                        gamma_d: spec.gamma_d,
                        c_max: spec.c_max,
                        d_max: spec.d_max,
                    });
                }
            }

            let price = price_at(&cfg.tariff, hour);
            let mut load = vec![Complex64::new(0.0, 0.0); n];
            let mut net_kw = vec![0.0; n];
            for i in 0..n {
                let base = scn.base_net(i, hour);
                let p = base + ev_kw[i] + bat_kw[i];
                net_kw[i] = p;
                load[i] = Complex64::new(p, p * net.buses[i].q_per_p());
                hist.demand[i][hour] = scn.loads[i].values[hour] + ev_kw[i] + bat_kw[i];
                if metered {
                    per_bus[i].arbitrage += price * ((base + ev_kw[i]).max(0.0) - p.max(0.0));
                }
            }
            hist.hours = hour + 1;
            let case = PfCase::new(net, load).with_taps(taps.clone());
            let sol = run_power_flow(&case).map_err(|source| HarnessError::PowerFlow { day, hour: h, source })?;
            for i in 0..n {
                let vm = sol.v[i].norm();
                if net.buses[i].is_substation || !metered {
                    continue;
                }
                let m = &mut per_bus[i];
                m.voltage_dev += metric_voltage_deviation(&[vm], band);
                let rating = net.rating(i);
                m.transformer_dev += metric_transformer_violation(&[net_kw[i]], rating);
                m.max_violation_kw = m.max_violation_kw.max(net_kw[i].abs() - rating);
                let (lo, hi) = bounds
                    .get(&i)
                    .map(|b| (b.x_lower[h], b.x_upper[h]))
                    .unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
                audit.push(AuditRow {
                    hour,
                    bus: i,
                    v_pu: vm,
                    load_kw: scn.loads[i].values[hour],
                    solar_kw: scn.solar[i][hour],
                    ev_kw: ev_kw[i],
                    battery_kw: bat_kw[i],
                    net_kw: net_kw[i],
                    x_lower_kw: lo,
                    x_upper_kw: hi,
                });
            }
            taps = update_regulator_taps(net, &sol, &taps);
        }
        if metered {
            all_bounds.push(bounds);
        }
    }
    for m in per_bus.iter_mut() {
        m.max_violation_kw = m.max_violation_kw.max(0.0);
    }
    Ok(RunResult {
        report: MetricsReport::from_buses(cfg.mode, cfg.penetrations, per_bus),
        audit,
        lc: stats,
        bounds: all_bounds,
        exactness: Vec::new(),
        crossings: 0,
        final_taps: taps,
    })
}

/// Builds the scenario and runs one mode.
pub fn run(net: &RadialNetwork, cfg: &RunConfig) -> Result<RunResult, HarnessError> {
    let scn = build_scenario(net, cfg)?;
    run_scenario(&scn, cfg)
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub storage_pct: f64,
    pub result: RunResult,
}

/// Every mode at every storage penetration; the scenario seed is shared so
/// modes see identical uncontrolled inputs.
pub fn sweep_storage(net: &RadialNetwork, cfg: &RunConfig, storage_pcts: &[f64]) -> Result<Vec<SweepEntry>, HarnessError> {
    if storage_pcts.is_empty() {
        return Err(HarnessError::Config("empty storage penetration list".into()));
    }
    let jobs: Vec<(f64, Mode)> = storage_pcts
        .iter()
        .flat_map(|&p| Mode::ALL.into_iter().map(move |m| (p, m)))
        .collect();
    let scenarios = storage_pcts
        .iter()
        .map(|&p| {
            let mut c = cfg.clone();
            c.penetrations.storage = p;
            build_scenario(net, &c)
        })
        .collect::<Result<Vec<_>, _>>()?;
    jobs.par_iter()
        .map(|&(p, mode)| {
            let k = storage_pcts.iter().position(|&q| q == p).expect("listed");
            let mut c = cfg.clone();
            c.penetrations.storage = p;
            c.mode = mode;
            Ok(SweepEntry {
                storage_pct: p,
                result: run_scenario(&scenarios[k], &c)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerBusReport {
    pub rows: Vec<BusMetrics>,
    /// Transformers whose worst violation exceeds [`VIOLATION_THRESHOLD_KW`].
    pub over_threshold: usize,
}

pub fn per_bus_report(report: &MetricsReport) -> PerBusReport {
    PerBusReport {
        over_threshold: report
            .per_bus
            .iter()
            .filter(|b| b.max_violation_kw > VIOLATION_THRESHOLD_KW)
            .count(),
        rows: report.per_bus.clone(),
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.9e}")
    }
}

pub fn write_summary_csv<W: Write>(out: W, reports: &[&MetricsReport]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "mode",
        "solar_pct",
        "storage_pct",
        "ev_pct",
        "voltage_dev",
        "transformer_dev",
        "arbitrage",
    ])?;
    for r in reports {
        w.write_record([
            r.mode.name().to_string(),
            format!("{:.3}", r.penetrations.solar),
            format!("{:.3}", r.penetrations.storage),
            format!("{:.3}", r.penetrations.ev),
            fmt_f(r.voltage_dev),
            fmt_f(r.transformer_dev),
            fmt_f(r.arbitrage),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_per_bus_csv<W: Write>(out: W, reports: &[&MetricsReport]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "mode",
        "storage_pct",
        "bus",
        "voltage_dev",
        "transformer_dev",
        "max_violation_kw",
        "arbitrage",
    ])?;
    for r in reports {
        for b in &r.per_bus {
            w.write_record([
                r.mode.name().to_string(),
                format!("{:.3}", r.penetrations.storage),
                b.bus.to_string(),
                fmt_f(b.voltage_dev),
                fmt_f(b.transformer_dev),
                fmt_f(b.max_violation_kw),
                fmt_f(b.arbitrage),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_audit_csv<W: Write>(out: W, runs: &[(&MetricsReport, &[AuditRow])]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "mode",
        "storage_pct",
        "hour",
        "bus",
        "v_pu",
        "load_kw",
        "solar_kw",
        "ev_kw",
        "battery_kw",
        "net_kw",
        "x_lower_kw",
        "x_upper_kw",
    ])?;
    for (r, rows) in runs {
        for a in rows.iter() {
            w.write_record([
                r.mode.name().to_string(),
                format!("{:.3}", r.penetrations.storage),
                a.hour.to_string(),
                a.bus.to_string(),
                format!("{:.9}", a.v_pu),
                format!("{:.6}", a.load_kw),
                format!("{:.6}", a.solar_kw),
                format!("{:.6}", a.ev_kw),
                format!("{:.6}", a.battery_kw),
                format!("{:.6}", a.net_kw),
                fmt_f(a.x_lower_kw),
                fmt_f(a.x_upper_kw),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the three CSV outputs for a set of runs into `dir`.
pub fn write_outputs(dir: &Path, runs: &[&RunResult]) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let reports: Vec<&MetricsReport> = runs.iter().map(|r| &r.report).collect();
    write_summary_csv(std::fs::File::create(dir.join("metrics_summary.csv"))?, &reports)?;
    write_per_bus_csv(std::fs::File::create(dir.join("per_bus.csv"))?, &reports)?;
    let audit: Vec<(&MetricsReport, &[AuditRow])> = runs.iter().map(|r| (&r.report, r.audit.as_slice())).collect();
    write_audit_csv(std::fs::File::create(dir.join("timeseries_audit.csv"))?, &audit)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voltage_metric_examples() {
        let band = (0.9025, 1.1025);
        assert_eq!(metric_voltage_deviation(&[0.95, 1.0, 1.05], band), 0.0);
        let one = metric_voltage_deviation(&[1.1125f64.sqrt()], band);
        assert!((one - 1e-4).abs() < 1e-12);
        let two = metric_voltage_deviation(&[1.1125f64.sqrt(); 2], band);
        assert!((two - 2.0 * one).abs() < 1e-15);
        let low = metric_voltage_deviation(&[0.8925f64.sqrt()], band);
        assert!((low - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn transformer_metric_examples() {
        assert_eq!(metric_transformer_violation(&[10.0, -20.0], 50.0), 0.0);
        assert_eq!(metric_transformer_violation(&[60.0], 50.0), 100.0);
        assert_eq!(metric_transformer_violation(&[-60.0], 50.0), 100.0);
    }

    #[test]
    fn arbitrage_examples() {
        let prices: Vec<f64> = (0..24).map(|h| price_at(&Tariff::default(), h)).collect();
        let base = vec![2.0; 24];
        assert_eq!(metric_arbitrage(&base, &base, &prices), 0.0);
        // 10 kWh bought at 10:00–14:00, 10 kWh displaced over 16:00–21:00
        let mut with = base.clone();
        for h in 10..15 {
            with[h] += 2.0;
        }
        for h in 16..21 {
            with[h] -= 2.0;
        }
        assert!((metric_arbitrage(&base, &with, &prices) - 2.58).abs() < 1e-9);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("both".parse::<Mode>().is_err());
    }
}
