//! Load and solar timeseries, DER placement, EV session sampling and tariff.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::RadialNetwork;
use crate::lc::BatterySpec;

pub const TIMESTAMP_FMT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("mixture '{name}': {msg}")]
    Mixture { name: String, msg: String },
    #[error("penetration {name} = {value} outside [0, 100]")]
    Penetration { name: &'static str, value: f64 },
    #[error("timeseries for node {node}: {msg}")]
    Timeseries { node: usize, msg: String },
    #[error("expected {expected} fast charging stations, got {found}")]
    Stations { expected: usize, found: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Hourly real power for one node, kW, consumption positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeseries {
    pub node_id: usize,
    pub start: NaiveDateTime,
    pub values: Vec<f64>,
}

impl Timeseries {
    pub fn new(node_id: usize, start: NaiveDateTime, values: Vec<f64>) -> Result<Self, ScenarioError> {
        let ts = Timeseries {
            node_id,
            start,
            values,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.values.len() % 24 != 0 {
            return Err(ScenarioError::Timeseries {
                node: self.node_id,
                msg: format!("length {} is not a multiple of 24", self.values.len()),
            });
        }
        if let Some(h) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(ScenarioError::Timeseries {
                node: self.node_id,
                msg: format!("non-finite value at hour {h}"),
            });
        }
        Ok(())
    }

    pub fn days(&self) -> usize {
        self.values.len() / 24
    }

    pub fn day(&self, d: usize) -> &[f64] {
        &self.values[d * 24..(d + 1) * 24]
    }

    /// Leading `days` whole days.
    pub fn truncated(&self, days: usize) -> Timeseries {
        Timeseries {
            node_id: self.node_id,
            start: self.start,
            values: self.values[..days * 24].to_vec(),
        }
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn mean_daily_energy(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.days() as f64
    }
}

pub fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 6, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

pub fn write_timeseries_csv<W: Write>(out: W, series: &[Timeseries]) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node_id", "timestamp", "kw"])?;
    for ts in series {
        for (h, v) in ts.values.iter().enumerate() {
            let stamp = ts.start + Duration::hours(h as i64);
            w.write_record([
                ts.node_id.to_string(),
                stamp.format(TIMESTAMP_FMT).to_string(),
                format!("{v:.6}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `node_id,timestamp,kw` rows. Rows of one node must be hourly and
/// contiguous; nodes are returned in ascending id order.
pub fn read_timeseries_csv<R: Read>(input: R) -> Result<Vec<Timeseries>, ScenarioError> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
    let mut by_node: BTreeMap<usize, (NaiveDateTime, Vec<f64>)> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |k: usize| rec.get(k).ok_or_else(|| ScenarioError::Parse {
            line,
            msg: format!("missing column {k}"),
        });
        let node: usize = field(0)?.parse().map_err(|e| ScenarioError::Parse {
            line,
            msg: format!("node_id: {e}"),
        })?;
        let stamp = NaiveDateTime::parse_from_str(field(1)?, TIMESTAMP_FMT).map_err(|e| ScenarioError::Parse {
            line,
            msg: format!("timestamp: {e}"),
        })?;
        let kw: f64 = field(2)?.parse().map_err(|e| ScenarioError::Parse {
            line,
            msg: format!("kw: {e}"),
        })?;
        let entry = by_node.entry(node).or_insert((stamp, Vec::new()));
        let expected = entry.0 + Duration::hours(entry.1.len() as i64);
        if stamp != expected {
            return Err(ScenarioError::Parse {
                line,
                msg: format!("node {node}: expected timestamp {expected}, found {stamp}"),
            });
        }
        entry.1.push(kw);
    }
    by_node
        .into_iter()
        .map(|(node, (start, values))| Timeseries::new(node, start, values))
        .collect()
}

/// One-dimensional Gaussian mixture given as (weight, mean, std) triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture(pub Vec<(f64, f64, f64)>);

impl Mixture {
    pub fn single(mean: f64, std: f64) -> Self {
        Mixture(vec![(1.0, mean, std)])
    }

    pub fn validate(&self, name: &str) -> Result<(), ScenarioError> {
        let err = |msg: String| ScenarioError::Mixture {
            name: name.to_string(),
            msg,
        };
        if self.0.is_empty() {
            return Err(err("no components".into()));
        }
        let total: f64 = self.0.iter().map(|c| c.0).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(err(format!("weights sum to {total}")));
        }
        for &(w, m, s) in &self.0 {
            if w < 0.0 || !m.is_finite() || !(s > 0.0) || !s.is_finite() {
                return Err(err(format!("bad component ({w}, {m}, {s})")));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.0.len() - 1;
        for (k, c) in self.0.iter().enumerate() {
            acc += c.0;
            if u < acc {
                pick = k;
                break;
            }
        }
        let (_, m, s) = self.0[pick];
        Normal::new(m, s).expect("validated std").sample(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    /// Share of EVs charging on a given day.
    pub fraction: Mixture,
    /// Plug-in hour of day.
    pub start: Mixture,
    /// Initial and final charge as fractions of the battery capacity.
    pub initial: Mixture,
    pub final_: Mixture,
    pub ev_battery_kwh: f64,
    /// Filled with the four largest nodes when left empty.
    pub fast_station_nodes: Vec<usize>,
    pub fast_charger_count: usize,
    pub p_fast_before_10am: f64,
    pub p_fast_other: f64,
    pub c_max_home: f64,
    pub c_max_fast: f64,
    pub gamma_c: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            fraction: Mixture::single(0.85, 0.05),
            start: Mixture(vec![(0.35, 8.0, 1.5), (0.65, 18.0, 2.0)]),
            initial: Mixture::single(0.3, 0.1),
            final_: Mixture::single(0.85, 0.05),
            ev_battery_kwh: 60.0,
            fast_station_nodes: Vec::new(),
            fast_charger_count: 120,
            // 0.6 / 0.05 scaled by `tune_fast_share` toward a 15% share
            p_fast_before_10am: DEFAULT_P_FAST.0,
            p_fast_other: DEFAULT_P_FAST.1,
            c_max_home: 6.0,
            c_max_fast: 40.0,
            gamma_c: 0.95,
        }
    }
}

/// Output of `tune_fast_share(0.6, 0.05, 0.15)` on the default mixtures.
pub const DEFAULT_P_FAST: (f64, f64) = (0.4096, 0.0341);

impl GmmConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.fraction.validate("fraction")?;
        self.start.validate("start")?;
        self.initial.validate("initial")?;
        self.final_.validate("final")?;
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.p_fast_before_10am) || !prob_ok(self.p_fast_other) {
            return Err(ScenarioError::Mixture {
                name: "p_fast".into(),
                msg: "probabilities must lie in [0, 1]".into(),
            });
        }
        if !(self.ev_battery_kwh > 0.0 && self.c_max_home > 0.0 && self.c_max_fast > 0.0) {
            return Err(ScenarioError::Mixture {
                name: "ev".into(),
                msg: "battery and charger sizes must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn p_fast(&self, start_hour: usize) -> f64 {
        if start_hour < 10 {
            self.p_fast_before_10am
        } else {
            self.p_fast_other
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSession {
    pub id: usize,
    /// Node where the session charges.
    pub node: usize,
    /// Residential node of the vehicle.
    pub home: usize,
    /// Absolute hour indices; charging happens in hours `arrival..depart`.
    pub arrival: usize,
    pub depart: usize,
    pub q_init: f64,
    pub q_final: f64,
    pub c_max: f64,
    pub is_fast: bool,
}

impl EvSession {
    pub fn need(&self) -> f64 {
        self.q_final - self.q_init
    }

    pub fn is_active(&self, hour: usize) -> bool {
        self.arrival <= hour && hour < self.depart
    }
}

/// Window length: 50% longer than the minimum charging time, rounded up.
pub fn session_window(need_kwh: f64, c_max: f64, gamma_c: f64) -> usize {
    let min_hours = need_kwh / (gamma_c * c_max);
    ((1.5 * min_hours - 1e-9).ceil() as usize).max(1)
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples one day of sessions for vehicles living at `homes` (one entry per
/// EV). Fast-eligible sessions keep `node = home` until
/// [`assign_fast_stations`] places them.
pub fn sample_ev_sessions(
    cfg: &GmmConfig,
    homes: &[usize],
    day: usize,
    seed: u64,
) -> Result<Vec<EvSession>, ScenarioError> {
    cfg.validate()?;
    if homes.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = seeded(seed, 0x5e55 + day as u64);
    let frac = cfg.fraction.sample(&mut rng).clamp(0.0, 1.0);
    let n_charging = (frac * homes.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..homes.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(n_charging);
    order.sort_unstable();

    let cap = cfg.ev_battery_kwh;
    let mut out = Vec::with_capacity(n_charging);
    for ev in order {
        let start = cfg.start.sample(&mut rng).rem_euclid(24.0).floor() as usize % 24;
        let (mut q0, mut q1) = (0.0, 0.0);
        for attempt in 0..100 {
            q0 = (cfg.initial.sample(&mut rng) * cap).clamp(0.0, cap);
            q1 = (cfg.final_.sample(&mut rng) * cap).clamp(0.0, cap);
            if q1 > q0 {
                break;
            }
            if attempt == 99 {
                std::mem::swap(&mut q0, &mut q1);
            }
        }
        if q1 <= q0 {
            // identical draws after swapping: give the session a minimal need
            q1 = (q0 + 1.0).min(cap);
            q0 = q1 - 1.0;
        }
        let is_fast = rng.random::<f64>() < cfg.p_fast(start);
        let c_max = if is_fast { cfg.c_max_fast } else { cfg.c_max_home };
        let arrival = day * 24 + start;
        out.push(EvSession {
            id: day * homes.len() + ev,
            node: homes[ev],
            home: homes[ev],
            arrival,
            depart: arrival + session_window(q1 - q0, c_max, cfg.gamma_c),
            q_init: q0,
            q_final: q1,
            c_max,
            is_fast,
        });
    }
    Ok(out)
}

/// Places fast sessions at the least-loaded station in arrival order. A
/// session that would push the concurrent fast count above
/// `fast_charger_count` is demoted to home charging.
pub fn assign_fast_stations(
    sessions: Vec<EvSession>,
    cfg: &GmmConfig,
) -> Result<Vec<EvSession>, ScenarioError> {
    if cfg.fast_station_nodes.len() != 4 {
        return Err(ScenarioError::Stations {
            expected: 4,
            found: cfg.fast_station_nodes.len(),
        });
    }
    let mut idx: Vec<usize> = (0..sessions.len()).collect();
    idx.sort_by_key(|&i| (sessions[i].arrival, sessions[i].id));
    let horizon = sessions.iter().map(|s| s.depart).max().unwrap_or(0);
    let mut total = vec![0usize; horizon];
    let mut per_station = vec![vec![0usize; horizon]; 4];
    let mut out = sessions;
    for i in idx {
        let s = &mut out[i];
        if !s.is_fast {
            continue;
        }
        let span = s.arrival..s.depart;
        let full = total[span.clone()].iter().any(|&c| c >= cfg.fast_charger_count);
        if full {
            s.is_fast = false;
            s.node = s.home;
            s.c_max = cfg.c_max_home;
            s.depart = s.arrival + session_window(s.need(), s.c_max, cfg.gamma_c);
            continue;
        }
        let load = |k: usize| per_station[k][span.clone()].iter().copied().max().unwrap_or(0);
        let k = (0..4).min_by_key(|&k| (load(k), k)).expect("four stations");
        for h in span {
            total[h] += 1;
            per_station[k][h] += 1;
        }
        s.node = cfg.fast_station_nodes[k];
        s.c_max = cfg.c_max_fast;
    }
    Ok(out)
}

/// Share of fast-eligible sessions over `n` sampled vehicles (one day).
pub fn fast_share(cfg: &GmmConfig, n: usize, seed: u64) -> Result<f64, ScenarioError> {
    let homes = vec![0; n];
    let s = sample_ev_sessions(cfg, &homes, 0, seed)?;
    if s.is_empty() {
        return Ok(0.0);
    }
    Ok(s.iter().filter(|s| s.is_fast).count() as f64 / s.len() as f64)
}

/// Bisects a common scale on (`p_before`, `p_other`) so the sampled fast
/// share hits `target`. Returns the scaled probabilities, rounded to 1e-4.
pub fn tune_fast_share(
    cfg: &GmmConfig,
    p_before: f64,
    p_other: f64,
    target: f64,
    seed: u64,
) -> Result<(f64, f64), ScenarioError> {
    let at = |scale: f64| -> Result<f64, ScenarioError> {
        let mut c = cfg.clone();
        c.p_fast_before_10am = (p_before * scale).min(1.0);
        c.p_fast_other = (p_other * scale).min(1.0);
        fast_share(&c, 20_000, seed)
    };
    let (mut lo, mut hi) = (0.0, 1.0 / p_before.max(p_other));
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if at(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    let round = |p: f64| ((p * s).min(1.0) * 1e4).round() / 1e4;
    Ok((round(p_before), round(p_other)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Penetrations {
    pub solar: f64,
    pub storage: f64,
    pub ev: f64,
}

impl Penetrations {
    pub fn none() -> Self {
        Penetrations {
            solar: 0.0,
            storage: 0.0,
            ev: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (name, value) in [("solar", self.solar), ("storage", self.storage), ("ev", self.ev)] {
            if !(0.0..=100.0).contains(&value) {
                return Err(ScenarioError::Penetration { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Node → installed solar capacity, kW.
    pub solar_nodes: BTreeMap<usize, f64>,
    pub storage_nodes: BTreeMap<usize, BatterySpec>,
    pub ev_counts: BTreeMap<usize, usize>,
    pub penetrations: Penetrations,
}

impl Placement {
    pub fn ev_homes(&self) -> Vec<usize> {
        self.ev_counts
            .iter()
            .flat_map(|(&n, &c)| std::iter::repeat_n(n, c))
            .collect()
    }
}

/// Storage template for placed batteries; capacity fields are overwritten.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageTemplate {
    /// Hours to charge from empty at rated power.
    pub duration_h: f64,
    pub gamma_l: f64,
    pub gamma_c: f64,
    pub gamma_d: f64,
    pub lambda_b: f64,
    /// Initial state of charge as a fraction of capacity.
    pub initial_soc: f64,
}

impl Default for StorageTemplate {
    fn default() -> Self {
        StorageTemplate {
            duration_h: 4.0,
            gamma_l: 0.9996,
            gamma_c: 0.95,
            gamma_d: 1.0 / 0.95,
            lambda_b: 0.001,
            initial_soc: 0.5,
        }
    }
}

/// Places solar on a random node subset, storage at solar nodes, and EVs by
/// house count.
///
/// Solar capacity totals `solar%` of the summed node peak demand, storage
/// energy totals `storage%` of the mean total daily energy, both split in
/// proportion to node demand. `houses[i]` is the house count of bus `i`.
pub fn place_ders(
    net: &RadialNetwork,
    loads: &[Timeseries],
    houses: &[usize],
    pen: Penetrations,
    template: &StorageTemplate,
    seed: u64,
) -> Result<Placement, ScenarioError> {
    pen.validate()?;
    let mut rng = seeded(seed, 0xde5);
    let candidates: Vec<&Timeseries> = loads
        .iter()
        .filter(|ts| ts.node_id < net.n_buses() && !net.buses[ts.node_id].is_substation)
        .collect();
    let mut chosen: Vec<&Timeseries> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < 0.5)
        .collect();
    if chosen.is_empty() && !candidates.is_empty() {
        chosen.push(candidates[rng.random_range(0..candidates.len())]);
    }

    let mut placement = Placement {
        solar_nodes: BTreeMap::new(),
        storage_nodes: BTreeMap::new(),
        ev_counts: BTreeMap::new(),
        penetrations: pen,
    };
    let total_peak: f64 = candidates.iter().map(|t| t.peak()).sum();
    let chosen_peak: f64 = chosen.iter().map(|t| t.peak()).sum();
    let total_energy: f64 = candidates.iter().map(|t| t.mean_daily_energy()).sum();
    let chosen_energy: f64 = chosen.iter().map(|t| t.mean_daily_energy()).sum();
    if pen.solar > 0.0 && chosen_peak > 0.0 {
        let cap = pen.solar / 100.0 * total_peak;
        for t in &chosen {
            placement.solar_nodes.insert(t.node_id, cap * t.peak() / chosen_peak);
        }
    }
    // storage sits at the solar-candidate nodes even when solar is 0%
    if pen.storage > 0.0 && chosen_energy > 0.0 {
        let q_total = pen.storage / 100.0 * total_energy;
        for t in &chosen {
            let q_max = q_total * t.mean_daily_energy() / chosen_energy;
            let p = q_max / template.duration_h;
            placement.storage_nodes.insert(
                t.node_id,
                BatterySpec {
                    c_max: p,
                    d_max: p,
                    q_min: 0.0,
                    q_max,
                    gamma_l: template.gamma_l,
                    gamma_c: template.gamma_c,
                    gamma_d: template.gamma_d,
                    lambda_b: template.lambda_b,
                },
            );
        }
    }
    if pen.ev > 0.0 {
        let total_houses: usize = houses.iter().sum();
        let n_evs = (total_houses as f64 * pen.ev / 100.0).round() as usize;
        placement.ev_counts = apportion(houses, n_evs);
    }
    Ok(placement)
}

/// Largest-remainder split of `n` items proportional to `weights`.
fn apportion(weights: &[usize], n: usize) -> BTreeMap<usize, usize> {
    let total: usize = weights.iter().sum();
    let mut out = BTreeMap::new();
    if total == 0 || n == 0 {
        return out;
    }
    let mut rem: Vec<(usize, f64)> = Vec::new();
    let mut given = 0;
    for (i, &w) in weights.iter().enumerate() {
        let exact = n as f64 * w as f64 / total as f64;
        let base = exact.floor() as usize;
        given += base;
        if base > 0 {
            out.insert(i, base);
        }
        rem.push((i, exact - base as f64));
    }
    rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(i, _) in rem.iter().take(n - given) {
        *out.entry(i).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tariff {
    pub peak_price: f64,
    pub offpeak_price: f64,
    pub peak_start: usize,
    pub peak_end: usize,
}

impl Default for Tariff {
    fn default() -> Self {
        Tariff {
            peak_price: 0.463,
            offpeak_price: 0.205,
            peak_start: 16,
            peak_end: 21,
        }
    }
}

impl Tariff {
    pub fn flat(price: f64) -> Self {
        Tariff {
            peak_price: price,
            offpeak_price: price,
            ..Tariff::default()
        }
    }
}

/// $/kWh for an hour index; hours past 23 wrap to the hour of day.
pub fn price_at(tariff: &Tariff, hour: usize) -> f64 {
    let h = hour % 24;
    if (tariff.peak_start..tariff.peak_end).contains(&h) {
        tariff.peak_price
    } else {
        tariff.offpeak_price
    }
}

/// Normalised clear-sky solar shape, zero outside 06:00–18:00.
pub fn clear_sky(hour: usize) -> f64 {
    let h = (hour % 24) as f64 + 0.5;
    if !(6.0..18.0).contains(&h) {
        return 0.0;
    }
    (std::f64::consts::PI * (h - 6.0) / 12.0).sin()
}

/// Diversified per-house demand shape, kW; evening peak of 2 kW at 19:00.
pub fn house_profile(hour: usize) -> f64 {
    const P: [f64; 24] = [
        0.70, 0.60, 0.55, 0.52, 0.52, 0.58, 0.80, 1.05, 1.00, 0.85, 0.80, 0.80, //
        0.82, 0.85, 0.90, 1.00, 1.20, 1.50, 1.85, 2.00, 1.90, 1.60, 1.20, 0.90,
    ];
    P[hour % 24]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadConfig {
    pub houses_per_bus: usize,
    /// Explicit house count per bus; overrides `houses_per_bus` when set.
    pub houses: Option<Vec<usize>>,
    /// Relative std of the day-level demand factor.
    pub day_std: f64,
    /// Relative std of the independent hourly noise.
    pub hour_std: f64,
    /// Daily cloud factor drawn uniformly from this range.
    pub cloud_range: (f64, f64),
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            houses_per_bus: 10,
            houses: None,
            day_std: 0.05,
            hour_std: 0.08,
            cloud_range: (0.7, 1.0),
        }
    }
}

/// Houses per bus: explicit list, or `houses_per_bus` scaled by a fixed
/// size pattern so node sizes differ.
pub fn house_counts(net: &RadialNetwork, cfg: &LoadConfig) -> Vec<usize> {
    if let Some(h) = &cfg.houses {
        return net.buses.iter().map(|b| h.get(b.id).copied().unwrap_or(0)).collect();
    }
    const PATTERN: [f64; 7] = [1.0, 0.6, 1.4, 0.8, 1.8, 0.7, 1.2];
    net.buses
        .iter()
        .map(|b| {
            if b.is_substation {
                0
            } else {
                (cfg.houses_per_bus as f64 * PATTERN[b.id % PATTERN.len()]).round() as usize
            }
        })
        .collect()
}

/// Synthetic residential demand, one series per bus (zero at the substation).
pub fn synth_loads(
    net: &RadialNetwork,
    houses: &[usize],
    cfg: &LoadConfig,
    days: usize,
    start: NaiveDateTime,
    seed: u64,
) -> Vec<Timeseries> {
    let mut rng = seeded(seed, 0x10ad);
    let day_noise = Normal::new(1.0, cfg.day_std.max(1e-12)).expect("positive std");
    let hour_noise = Normal::new(1.0, cfg.hour_std.max(1e-12)).expect("positive std");
    let mut day_factor = vec![0.0; days];
    for f in day_factor.iter_mut() {
        *f = day_noise.sample(&mut rng);
    }
    net.buses
        .iter()
        .map(|b| {
            let n = houses[b.id] as f64;
            let values = (0..days * 24)
                .map(|h| {
                    let noise: f64 = hour_noise.sample(&mut rng);
                    (n * house_profile(h) * day_factor[h / 24] * noise).max(0.0)
                })
                .collect();
            Timeseries {
                node_id: b.id,
                start,
                values,
            }
        })
        .collect()
}

/// Realised solar output, kW, for each placed node.
pub fn synth_solar(
    placement: &Placement,
    days: usize,
    cloud_range: (f64, f64),
    start: NaiveDateTime,
    seed: u64,
) -> Vec<Timeseries> {
    let mut rng = seeded(seed, 0x501a);
    let (lo, hi) = cloud_range;
    let clouds: Vec<f64> = (0..days)
        .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect();
    placement
        .solar_nodes
        .iter()
        .map(|(&node, &cap)| Timeseries {
            node_id: node,
            start,
            values: (0..days * 24).map(|h| cap * clear_sky(h) * clouds[h / 24]).collect(),
        })
        .collect()
}

/// Indices of the `k` buses with the largest peak demand, ascending.
pub fn largest_nodes(loads: &[Timeseries], k: usize) -> Vec<usize> {
    let mut by_peak: Vec<(usize, f64)> = loads.iter().map(|t| (t.node_id, t.peak())).collect();
    by_peak.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = by_peak.into_iter().take(k).map(|p| p.0).collect();
    out.sort_unstable();
    out
}

pub fn write_sessions_csv<W: Write>(out: W, sessions: &[EvSession]) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_writer(out);
    for s in sessions {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sessions_csv<R: Read>(input: R) -> Result<Vec<EvSession>, ScenarioError> {
    let mut rdr = csv::Reader::from_reader(input);
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::feeder15;

    #[test]
    fn tariff_hours() {
        let t = Tariff::default();
        assert_eq!(price_at(&t, 17), 0.463);
        assert_eq!(price_at(&t, 16), 0.463);
        assert_eq!(price_at(&t, 21), 0.205);
        assert_eq!(price_at(&t, 3), 0.205);
        assert_eq!(price_at(&t, 24 + 17), 0.463);
    }

    #[test]
    fn window_rule() {
        assert_eq!(session_window(24.0, 6.0, 1.0), 6);
        assert_eq!(session_window(6.0, 6.0, 1.0), 2);
    }

    #[test]
    fn no_evs_no_sessions() {
        let s = sample_ev_sessions(&GmmConfig::default(), &[], 0, 42).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn unnormalised_mixture_rejected() {
        let mut cfg = GmmConfig::default();
        cfg.start = Mixture(vec![(0.5, 8.0, 1.0), (0.4, 18.0, 1.0)]);
        assert!(matches!(
            sample_ev_sessions(&cfg, &[1, 2], 0, 1),
            Err(ScenarioError::Mixture { .. })
        ));
    }

    #[test]
    fn sessions_feasible_and_deterministic() {
        let cfg = GmmConfig::default();
        let homes: Vec<usize> = (0..500).map(|i| 1 + i % 14).collect();
        let a = sample_ev_sessions(&cfg, &homes, 3, 9).unwrap();
        let b = sample_ev_sessions(&cfg, &homes, 3, 9).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(s.q_final > s.q_init && s.q_init >= 0.0);
            let w = (s.depart - s.arrival) as f64;
            assert!(s.need() <= cfg.gamma_c * s.c_max * w + 1e-9);
            assert!(s.arrival >= 72 && s.arrival < 96);
        }
    }

    fn fast_cfg() -> GmmConfig {
        GmmConfig {
            fast_station_nodes: vec![1, 2, 3, 4],
            ..GmmConfig::default()
        }
    }

    fn fast_session(id: usize) -> EvSession {
        EvSession {
            id,
            node: 9,
            home: 9,
            arrival: 8,
            depart: 10,
            q_init: 20.0,
            q_final: 50.0,
            c_max: 40.0,
            is_fast: true,
        }
    }

    #[test]
    fn fast_capacity_clamp() {
        let cfg = fast_cfg();
        let out = assign_fast_stations((0..130).map(fast_session).collect(), &cfg).unwrap();
        let fast: Vec<_> = out.iter().filter(|s| s.is_fast).collect();
        assert_eq!(fast.len(), 120);
        for k in [1, 2, 3, 4] {
            assert_eq!(fast.iter().filter(|s| s.node == k).count(), 30);
        }
        for s in out.iter().filter(|s| !s.is_fast) {
            assert_eq!((s.node, s.c_max), (9, 6.0));
            assert!(s.need() <= cfg.gamma_c * s.c_max * (s.depart - s.arrival) as f64);
        }
    }

    #[test]
    fn no_fast_eligible_all_residential() {
        let mut s = fast_session(0);
        s.is_fast = false;
        s.c_max = 6.0;
        let out = assign_fast_stations(vec![s.clone()], &fast_cfg()).unwrap();
        assert_eq!(out, vec![s]);
    }

    #[test]
    fn placement_totals() {
        let net = feeder15();
        let lc = LoadConfig::default();
        let houses = house_counts(&net, &lc);
        let loads = synth_loads(&net, &houses, &lc, 7, default_start(), 3);
        let pen = Penetrations {
            solar: 50.0,
            storage: 10.0,
            ev: 50.0,
        };
        let p = place_ders(&net, &loads, &houses, pen, &StorageTemplate::default(), 5).unwrap();
        let total_peak: f64 = loads.iter().skip(1).map(|t| t.peak()).sum();
        let solar: f64 = p.solar_nodes.values().sum();
        assert!((solar - 0.5 * total_peak).abs() < 1e-9);
        let energy: f64 = loads.iter().skip(1).map(|t| t.mean_daily_energy()).sum();
        let q: f64 = p.storage_nodes.values().map(|b| b.q_max).sum();
        assert!((q - 0.1 * energy).abs() < 1.0);
        assert!(p.storage_nodes.keys().all(|k| p.solar_nodes.contains_key(k)));
        let n: usize = p.ev_counts.values().sum();
        assert_eq!(n, (houses.iter().sum::<usize>() as f64 * 0.5).round() as usize);
        let again = place_ders(&net, &loads, &houses, pen, &StorageTemplate::default(), 5).unwrap();
        assert_eq!(p, again);
        assert!(place_ders(&net, &loads, &houses, Penetrations::none(), &StorageTemplate::default(), 5)
            .map(|p| p.solar_nodes.is_empty() && p.storage_nodes.is_empty() && p.ev_counts.is_empty())
            .unwrap());
        let bad = Penetrations { solar: 150.0, ..pen };
        assert!(place_ders(&net, &loads, &houses, bad, &StorageTemplate::default(), 5).is_err());
    }

    #[test]
    fn timeseries_csv_round_trip() {
        let a = Timeseries::new(3, default_start(), (0..48).map(|h| h as f64 * 0.5).collect()).unwrap();
        let b = Timeseries::new(1, default_start(), vec![1.25; 24]).unwrap();
        let mut buf = Vec::new();
        write_timeseries_csv(&mut buf, &[a.clone(), b.clone()]).unwrap();
        let back = read_timeseries_csv(buf.as_slice()).unwrap();
        assert_eq!(back, vec![b, a]);
    }

    #[test]
    fn timeseries_rejects_partial_day() {
        assert!(Timeseries::new(0, default_start(), vec![1.0; 25]).is_err());
        assert!(Timeseries::new(0, default_start(), vec![f64::NAN; 24]).is_err());
    }

    #[test]
    fn default_fast_probabilities_reproduce() {
        let cfg = GmmConfig::default();
        let tuned = tune_fast_share(&cfg, 0.6, 0.05, 0.15, 42).unwrap();
        assert_eq!(tuned, DEFAULT_P_FAST);
    }
}
