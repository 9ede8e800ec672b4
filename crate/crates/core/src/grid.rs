//! Radial feeder data model.
//!
//! A [`RadialNetwork`] is a positive-sequence equivalent of a distribution
//! feeder: buses carrying secondary transformers (one per bus), series lines
//! with optional tap-changing regulators, and fixed shunt capacitor banks.
//! Impedances are stored per-unit once [`RadialNetwork::per_unit`] is set;
//! bus power quantities (transformer ratings, capacitor kVAr) always stay in
//! physical units and are converted with [`RadialNetwork::kw_to_pu`].

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Impedances below this magnitude are treated as ideal ties.
pub const IDEAL_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at record {record}: {msg}")]
    Parse { record: usize, msg: String },
    #[error("duplicate bus id {0}")]
    DuplicateBus(usize),
    #[error("network is not a valid radial feeder: {}", join_violations(.0))]
    Topology(Vec<Violation>),
    #[error("per-unit bases must be positive (base_mva = {base_mva}, base_kv = {base_kv})")]
    NonPositiveBase { base_mva: f64, base_kv: f64 },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub is_substation: bool,
    /// Two-way secondary transformer limit in kW. `None` until a default is
    /// derived from load history (see [`RadialNetwork::fill_default_ratings`]).
    pub transformer_rating: Option<f64>,
    pub has_cap_bank: bool,
    /// Capacitor bank reactive output, kVAr.
    pub cap_bank_q: f64,
    /// Member of the controllable (participating) node set.
    pub controllable: bool,
    pub load_power_factor: f64,
}

impl Bus {
    pub fn new(id: usize) -> Self {
        Bus {
            id,
            is_substation: false,
            transformer_rating: None,
            has_cap_bank: false,
            cap_bank_q: 0.0,
            controllable: false,
            load_power_factor: 1.0,
        }
    }

    /// Reactive-to-real ratio implied by the load power factor.
    pub fn q_per_p(&self) -> f64 {
        let pf = self.load_power_factor.clamp(1e-6, 1.0);
        (1.0 - pf * pf).sqrt() / pf
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatorSpec {
    pub tap_min: i32,
    pub tap_max: i32,
    /// Voltage ratio change per tap position.
    pub step: f64,
    /// Regulated (receiving-end) voltage set point, pu.
    pub target_v: f64,
    pub deadband: f64,
    /// Taps only move under forward (substation to load) flow.
    pub unidirectional: bool,
}

impl RegulatorSpec {
    pub const DEFAULT_TARGET_V: f64 = 1.0;
    pub const DEFAULT_DEADBAND: f64 = 0.01;

    /// Receiving-end voltage ratio at the given tap position.
    pub fn ratio(&self, tap: i32) -> f64 {
        1.0 + self.step * tap as f64
    }

    pub fn clamp_tap(&self, tap: i32) -> i32 {
        tap.clamp(self.tap_min, self.tap_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub impedance: Complex64,
    /// `1 / impedance`; zero for ideal ties (see [`Line::is_ideal`]).
    pub admittance: Complex64,
    pub regulator: Option<RegulatorSpec>,
}

impl Line {
    pub fn new(from: usize, to: usize, impedance: Complex64) -> Self {
        Line {
            from,
            to,
            impedance,
            admittance: admittance_of(impedance),
            regulator: None,
        }
    }

    pub fn with_regulator(mut self, reg: RegulatorSpec) -> Self {
        self.regulator = Some(reg);
        self
    }

    pub fn is_ideal(&self) -> bool {
        self.impedance.norm() < IDEAL_TIE_EPS
    }
}

fn admittance_of(z: Complex64) -> Complex64 {
    if z.norm() < IDEAL_TIE_EPS {
        Complex64::new(0.0, 0.0)
    } else {
        z.inv()
    }
}

/// One structural problem found by [`validate_radial`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoSubstation,
    MultipleSubstations,
    Unreachable(usize),
    LineCount { expected: usize, found: usize },
    Cycle { from: usize, to: usize },
    UnknownBus { from: usize, to: usize },
    BusIdMismatch { position: usize, id: usize },
    NonPositiveRating(usize),
    BadPowerFactor(usize),
    ZeroImpedance { from: usize, to: usize },
    AdmittanceMismatch { from: usize, to: usize },
    BadRegulator { from: usize, to: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSubstation => write!(f, "no substation"),
            Violation::MultipleSubstations => write!(f, "multiple substations"),
            Violation::Unreachable(b) => write!(f, "bus {b} unreachable"),
            Violation::LineCount { expected, found } => {
                write!(f, "expected {expected} lines for a spanning tree, found {found}")
            }
            Violation::Cycle { from, to } => write!(f, "line {from}-{to} closes a cycle"),
            Violation::UnknownBus { from, to } => {
                write!(f, "line {from}-{to} references an unknown bus")
            }
            Violation::BusIdMismatch { position, id } => {
                write!(f, "bus at position {position} has id {id}")
            }
            Violation::NonPositiveRating(b) => {
                write!(f, "bus {b} has a nonpositive transformer rating")
            }
            Violation::BadPowerFactor(b) => write!(f, "bus {b} power factor outside (0, 1]"),
            Violation::ZeroImpedance { from, to } => {
                write!(f, "line {from}-{to} has zero impedance")
            }
            Violation::AdmittanceMismatch { from, to } => {
                write!(f, "line {from}-{to} admittance is not the reciprocal of its impedance")
            }
            Violation::BadRegulator { from, to } => {
                write!(f, "line {from}-{to} regulator needs tap_min <= 0 <= tap_max and step > 0")
            }
        }
    }
}

/// Tree orientation of a feeder rooted at the substation.
#[derive(Debug, Clone)]
pub struct Topology {
    pub root: usize,
    /// Breadth-first order from the root; parents precede children.
    pub order: Vec<usize>,
    /// For each bus, the index of the line feeding it (None at the root).
    pub parent_line: Vec<Option<usize>>,
    /// For each bus, the indices of lines feeding its children.
    pub child_lines: Vec<Vec<usize>>,
    /// Per line, true when `from` is the parent side.
    pub forward: Vec<bool>,
}

impl Topology {
    /// Parent-side bus of a line.
    pub fn upstream(&self, net: &RadialNetwork, line: usize) -> usize {
        let l = &net.lines[line];
        if self.forward[line] {
            l.from
        } else {
            l.to
        }
    }

    pub fn downstream(&self, net: &RadialNetwork, line: usize) -> usize {
        let l = &net.lines[line];
        if self.forward[line] {
            l.to
        } else {
            l.from
        }
    }

    /// Buses in the subtree rooted at `bus`, including itself.
    pub fn subtree(&self, net: &RadialNetwork, bus: usize) -> Vec<usize> {
        let mut out = vec![bus];
        let mut i = 0;
        while i < out.len() {
            let b = out[i];
            for &l in &self.child_lines[b] {
                out.push(self.downstream(net, l));
            }
            i += 1;
        }
        out
    }

    /// Number of lines between the root and each bus.
    pub fn depth(&self, net: &RadialNetwork) -> Vec<usize> {
        let mut depth = vec![0; self.order.len()];
        for &b in &self.order {
            if let Some(l) = self.parent_line[b] {
                depth[b] = depth[self.upstream(net, l)] + 1;
            }
        }
        depth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialNetwork {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub base_mva: f64,
    pub base_kv: f64,
    /// Impedances are already normalized by the impedance base.
    pub per_unit: bool,
}

impl RadialNetwork {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn substation(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.is_substation)
    }

    pub fn z_base(&self) -> f64 {
        self.base_kv * self.base_kv / self.base_mva
    }

    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / (self.base_mva * 1000.0)
    }

    pub fn pu_to_kw(&self, pu: f64) -> f64 {
        pu * self.base_mva * 1000.0
    }

    pub fn controllable(&self) -> Vec<usize> {
        self.buses
            .iter()
            .filter(|b| b.controllable && !b.is_substation)
            .map(|b| b.id)
            .collect()
    }

    /// Rating of a bus transformer, kW; infinite when unset.
    pub fn rating(&self, bus: usize) -> f64 {
        self.buses[bus].transformer_rating.unwrap_or(f64::INFINITY)
    }

    /// Orients the feeder from the substation. Fails with the full violation
    /// list when the buses and lines do not form a spanning tree.
    pub fn topology(&self) -> Result<Topology, GridError> {
        let violations = tree_violations(self);
        if !violations.is_empty() {
            return Err(GridError::Topology(violations));
        }
        Ok(orient(self).expect("tree checked above"))
    }

    /// Sets missing transformer ratings to `multiplier` times the bus's
    /// historical peak load.
    pub fn fill_default_ratings(&mut self, peak_kw: &[f64], multiplier: f64) {
        for bus in self.buses.iter_mut().filter(|b| !b.is_substation) {
            if bus.transformer_rating.is_none() {
                let peak = peak_kw.get(bus.id).copied().unwrap_or(0.0).abs();
                bus.transformer_rating = Some((multiplier * peak).max(1e-3));
            }
        }
    }
}

/// BFS from the substation; returns None if lines reference unknown buses or
/// there is no unique substation.
fn orient(net: &RadialNetwork) -> Option<Topology> {
    let n = net.n_buses();
    let root = net.substation()?;
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (li, l) in net.lines.iter().enumerate() {
        if l.from >= n || l.to >= n {
            return None;
        }
        adj[l.from].push((l.to, li));
        adj[l.to].push((l.from, li));
    }
    let mut parent_line = vec![None; n];
    let mut child_lines = vec![Vec::new(); n];
    let mut forward = vec![true; net.lines.len()];
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(b) = queue.pop_front() {
        order.push(b);
        for &(nb, li) in &adj[b] {
            if !seen[nb] {
                seen[nb] = true;
                parent_line[nb] = Some(li);
                child_lines[b].push(li);
                forward[li] = net.lines[li].from == b;
                queue.push_back(nb);
            }
        }
    }
    Some(Topology {
        root,
        order,
        parent_line,
        child_lines,
        forward,
    })
}

fn tree_violations(net: &RadialNetwork) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = net.n_buses();
    for (pos, b) in net.buses.iter().enumerate() {
        if b.id != pos {
            out.push(Violation::BusIdMismatch { position: pos, id: b.id });
        }
    }
    match net.buses.iter().filter(|b| b.is_substation).count() {
        0 => out.push(Violation::NoSubstation),
        1 => {}
        _ => out.push(Violation::MultipleSubstations),
    }
    let mut bad_ref = false;
    for l in &net.lines {
        if l.from >= n || l.to >= n || l.from == l.to {
            out.push(Violation::UnknownBus { from: l.from, to: l.to });
            bad_ref = true;
        }
    }
    if n > 0 && net.lines.len() != n - 1 {
        out.push(Violation::LineCount {
            expected: n - 1,
            found: net.lines.len(),
        });
    }
    if bad_ref {
        return out;
    }
    // union-find for cycles
    let mut uf: Vec<usize> = (0..n).collect();
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    for l in &net.lines {
        let (a, b) = (find(&mut uf, l.from), find(&mut uf, l.to));
        if a == b {
            out.push(Violation::Cycle { from: l.from, to: l.to });
        } else {
            uf[a] = b;
        }
    }
    if let Some(root) = net.substation() {
        let r = find(&mut uf, root);
        for b in 0..n {
            if find(&mut uf, b) != r {
                out.push(Violation::Unreachable(b));
            }
        }
    }
    out
}

/// Checks every [`RadialNetwork`] invariant; an empty list means the network
/// is a well-formed radial feeder.
pub fn validate_radial(net: &RadialNetwork) -> Vec<Violation> {
    let mut out = tree_violations(net);
    for b in &net.buses {
        if b.is_substation {
            continue;
        }
        if matches!(b.transformer_rating, Some(r) if r <= 0.0 || !r.is_finite()) {
            out.push(Violation::NonPositiveRating(b.id));
        }
        if !(b.load_power_factor > 0.0 && b.load_power_factor <= 1.0) {
            out.push(Violation::BadPowerFactor(b.id));
        }
    }
    for l in &net.lines {
        let (from, to) = (l.from, l.to);
        if l.is_ideal() {
            out.push(Violation::ZeroImpedance { from, to });
        } else if (l.admittance * l.impedance - 1.0).norm() > 1e-12 {
            out.push(Violation::AdmittanceMismatch { from, to });
        }
        if let Some(r) = &l.regulator {
            if r.tap_min > 0 || r.tap_max < 0 || r.step <= 0.0 {
                out.push(Violation::BadRegulator { from, to });
            }
        }
    }
    out
}

/// Converts ohmic impedances to per-unit on the given bases. Input already
/// flagged per-unit is returned unchanged.
pub fn to_per_unit(
    raw: &RadialNetwork,
    base_mva: f64,
    base_kv: f64,
) -> Result<RadialNetwork, GridError> {
    check_bases(base_mva, base_kv)?;
    if raw.per_unit {
        return Ok(raw.clone());
    }
    let z_base = base_kv * base_kv / base_mva;
    let mut net = raw.clone();
    for l in &mut net.lines {
        l.impedance /= z_base;
        l.admittance = admittance_of(l.impedance);
    }
    net.base_mva = base_mva;
    net.base_kv = base_kv;
    net.per_unit = true;
    Ok(net)
}

/// Inverse of [`to_per_unit`] using the network's own bases.
pub fn to_ohms(net: &RadialNetwork) -> Result<RadialNetwork, GridError> {
    check_bases(net.base_mva, net.base_kv)?;
    if !net.per_unit {
        return Ok(net.clone());
    }
    let z_base = net.z_base();
    let mut raw = net.clone();
    for l in &mut raw.lines {
        l.impedance *= z_base;
        l.admittance = admittance_of(l.impedance);
    }
    raw.per_unit = false;
    Ok(raw)
}

fn check_bases(base_mva: f64, base_kv: f64) -> Result<(), GridError> {
    if base_mva > 0.0 && base_kv > 0.0 && base_mva.is_finite() && base_kv.is_finite() {
        Ok(())
    } else {
        Err(GridError::NonPositiveBase { base_mva, base_kv })
    }
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

const BUS_COLUMNS: [&str; 6] = ["id", "is_substation", "rating_kw", "cap_q_kvar", "controllable", "pf"];
const LINE_COLUMNS: [&str; 8] = [
    "from", "to", "r_pu", "x_pu", "reg_tapmin", "reg_tapmax", "reg_step", "reg_unidir",
];
const BASE_COLUMNS: [&str; 2] = ["base_mva", "base_kv"];

pub const DEFAULT_BASE_MVA: f64 = 1.0;
pub const DEFAULT_BASE_KV: f64 = 4.16;

struct Section {
    columns: Vec<String>,
}

impl Section {
    fn field<'a>(&self, rec: &'a csv::StringRecord, name: &str) -> Option<&'a str> {
        let idx = self.columns.iter().position(|c| c == name)?;
        rec.get(idx + 1).map(str::trim)
    }
}

pub fn load_network(path: impl AsRef<Path>) -> Result<RadialNetwork, GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_network(&text)
}

/// Parses the sectioned network CSV. Each section starts with a header row
/// (`BUS,id,...`, `LINE,from,...`, optional `BASE,base_mva,base_kv`) followed
/// by data rows carrying the same leading tag.
pub fn parse_network(text: &str) -> Result<RadialNetwork, GridError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut bus_section: Option<Section> = None;
    let mut line_section: Option<Section> = None;
    let mut base_section: Option<Section> = None;
    let mut buses: Vec<Bus> = Vec::new();
    let mut lines: Vec<Line> = Vec::new();
    let (mut base_mva, mut base_kv) = (DEFAULT_BASE_MVA, DEFAULT_BASE_KV);

    for (i, rec) in rdr.records().enumerate() {
        let record = i + 1;
        let rec = rec.map_err(|e| GridError::Parse {
            record,
            msg: e.to_string(),
        })?;
        let perr = |msg: String| GridError::Parse { record, msg };
        let tag = rec.get(0).unwrap_or("").to_ascii_uppercase();
        if tag.is_empty() && rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let second = rec.get(1).unwrap_or("");
        let is_header = second.parse::<f64>().is_err();
        let slot = match tag.as_str() {
            "BUS" => (&mut bus_section, &BUS_COLUMNS[..]),
            "LINE" => (&mut line_section, &LINE_COLUMNS[..]),
            "BASE" => (&mut base_section, &BASE_COLUMNS[..]),
            other => return Err(perr(format!("unknown record tag '{other}'"))),
        };
        if is_header {
            let columns: Vec<String> = rec.iter().skip(1).map(|c| c.to_ascii_lowercase()).collect();
            for req in slot.1 {
                if !columns.iter().any(|c| c == req) {
                    return Err(perr(format!("{tag} header missing column '{req}'")));
                }
            }
            *slot.0 = Some(Section { columns });
            continue;
        }
        let section = slot
            .0
            .as_ref()
            .ok_or_else(|| perr(format!("{tag} data row before its header row")))?;
        match tag.as_str() {
            "BUS" => buses.push(parse_bus(section, &rec).map_err(perr)?),
            "LINE" => lines.push(parse_line(section, &rec).map_err(perr)?),
            _ => {
                base_mva = req_f64(section, &rec, "base_mva").map_err(perr)?;
                base_kv = req_f64(section, &rec, "base_kv").map_err(perr)?;
            }
        }
    }

    check_bases(base_mva, base_kv)?;
    buses.sort_by_key(|b| b.id);
    for w in buses.windows(2) {
        if w[0].id == w[1].id {
            return Err(GridError::DuplicateBus(w[0].id));
        }
    }
    let net = RadialNetwork {
        buses,
        lines,
        base_mva,
        base_kv,
        per_unit: true,
    };
    let violations = validate_radial(&net);
    if !violations.is_empty() {
        return Err(GridError::Topology(violations));
    }
    Ok(net)
}

fn req_f64(s: &Section, rec: &csv::StringRecord, name: &str) -> Result<f64, String> {
    let raw = s.field(rec, name).ok_or_else(|| format!("missing field '{name}'"))?;
    raw.parse::<f64>()
        .map_err(|_| format!("field '{name}': cannot parse '{raw}' as a number"))
}

fn opt_f64(s: &Section, rec: &csv::StringRecord, name: &str) -> Result<Option<f64>, String> {
    match s.field(rec, name) {
        None | Some("") => Ok(None),
        Some(raw) => raw
            .parse::<f64>()
            .map(Some)
            .map_err(|_| format!("field '{name}': cannot parse '{raw}' as a number")),
    }
}

fn parse_flag(s: &Section, rec: &csv::StringRecord, name: &str) -> Result<bool, String> {
    match s.field(rec, name).unwrap_or("").to_ascii_lowercase().as_str() {
        "" | "0" | "false" | "no" => Ok(false),
        "1" | "true" | "yes" => Ok(true),
        other => Err(format!("field '{name}': '{other}' is not a boolean")),
    }
}

fn parse_bus(s: &Section, rec: &csv::StringRecord) -> Result<Bus, String> {
    let id_raw = req_f64(s, rec, "id")?;
    if id_raw < 0.0 || id_raw.fract() != 0.0 {
        return Err(format!("bus id '{id_raw}' is not a nonnegative integer"));
    }
    let cap_q = opt_f64(s, rec, "cap_q_kvar")?.unwrap_or(0.0);
    Ok(Bus {
        id: id_raw as usize,
        is_substation: parse_flag(s, rec, "is_substation")?,
        transformer_rating: opt_f64(s, rec, "rating_kw")?,
        has_cap_bank: cap_q != 0.0,
        cap_bank_q: cap_q,
        controllable: parse_flag(s, rec, "controllable")?,
        load_power_factor: opt_f64(s, rec, "pf")?.unwrap_or(1.0),
    })
}

fn parse_line(s: &Section, rec: &csv::StringRecord) -> Result<Line, String> {
    let idx = |name: &str| -> Result<usize, String> {
        let v = req_f64(s, rec, name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(format!("field '{name}': '{v}' is not a bus id"));
        }
        Ok(v as usize)
    };
    let z = Complex64::new(req_f64(s, rec, "r_pu")?, req_f64(s, rec, "x_pu")?);
    let mut line = Line::new(idx("from")?, idx("to")?, z);
    let tap_min = opt_f64(s, rec, "reg_tapmin")?;
    let tap_max = opt_f64(s, rec, "reg_tapmax")?;
    let step = opt_f64(s, rec, "reg_step")?;
    match (tap_min, tap_max, step) {
        (None, None, None) => {}
        (Some(lo), Some(hi), Some(step)) => {
            line.regulator = Some(RegulatorSpec {
                tap_min: lo as i32,
                tap_max: hi as i32,
                step,
                target_v: opt_f64(s, rec, "reg_target_v")?
                    .unwrap_or(RegulatorSpec::DEFAULT_TARGET_V),
                deadband: opt_f64(s, rec, "reg_deadband")?
                    .unwrap_or(RegulatorSpec::DEFAULT_DEADBAND),
                unidirectional: parse_flag(s, rec, "reg_unidir")?,
            });
        }
        _ => return Err("regulator needs reg_tapmin, reg_tapmax and reg_step together".into()),
    }
    Ok(line)
}

/// Serializes a network back to the sectioned CSV format.
pub fn write_network(net: &RadialNetwork) -> String {
    let mut out = String::new();
    out.push_str("BASE,base_mva,base_kv\n");
    out.push_str(&format!("BASE,{},{}\n", net.base_mva, net.base_kv));
    out.push_str("BUS,id,is_substation,rating_kw,cap_q_kvar,controllable,pf\n");
    for b in &net.buses {
        let rating = b.transformer_rating.map(|r| r.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "BUS,{},{},{},{},{},{}\n",
            b.id,
            b.is_substation as u8,
            rating,
            b.cap_bank_q,
            b.controllable as u8,
            b.load_power_factor
        ));
    }
    out.push_str("LINE,from,to,r_pu,x_pu,reg_tapmin,reg_tapmax,reg_step,reg_unidir,reg_target_v,reg_deadband\n");
    for l in &net.lines {
        let reg = match &l.regulator {
            Some(r) => format!(
                "{},{},{},{},{},{}",
                r.tap_min, r.tap_max, r.step, r.unidirectional as u8, r.target_v, r.deadband
            ),
            None => ",,,,,".to_string(),
        };
        out.push_str(&format!(
            "LINE,{},{},{},{},{}\n",
            l.from, l.to, l.impedance.re, l.impedance.im, reg
        ));
    }
    out
}

/// The bundled 15-bus desk-scale feeder.
pub const FEEDER15_CSV: &str = include_str!("../data/feeder15.csv");

pub fn feeder15() -> RadialNetwork {
    parse_network(FEEDER15_CSV).expect("bundled feeder parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = "\
BUS,id,is_substation,rating_kw,cap_q_kvar,controllable,pf
BUS,0,1,,0,0,1
BUS,1,0,50,0,1,0.95
LINE,from,to,r_pu,x_pu,reg_tapmin,reg_tapmax,reg_step,reg_unidir
LINE,0,1,0.01,0.02,,,,
";

    fn two_bus() -> RadialNetwork {
        parse_network(TWO_BUS).unwrap()
    }

    #[test]
    fn two_bus_admittance_is_reciprocal() {
        let net = two_bus();
        assert_eq!(net.lines.len(), 1);
        let want = Complex64::new(1.0, 0.0) / Complex64::new(0.01, 0.02);
        assert!((net.lines[0].admittance - want).norm() < 1e-12);
        assert!(validate_radial(&net).is_empty());
    }

    #[test]
    fn cycle_is_a_topology_error() {
        let text = "\
BUS,id,is_substation,rating_kw,cap_q_kvar,controllable,pf
BUS,0,1,,0,0,1
BUS,1,0,50,0,1,1
BUS,2,0,50,0,1,1
LINE,from,to,r_pu,x_pu,reg_tapmin,reg_tapmax,reg_step,reg_unidir
LINE,0,1,0.01,0.02,,,,
LINE,1,2,0.01,0.02,,,,
LINE,2,0,0.01,0.02,,,,
";
        match parse_network(text) {
            Err(GridError::Topology(v)) => {
                assert!(v.iter().any(|v| matches!(v, Violation::Cycle { .. })))
            }
            other => panic!("expected topology error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_bus_rejected() {
        let text = "\
BUS,id,is_substation,rating_kw,cap_q_kvar,controllable,pf
BUS,0,1,,0,0,1
BUS,0,0,50,0,1,1
";
        assert!(matches!(parse_network(text), Err(GridError::DuplicateBus(0))));
    }

    #[test]
    fn malformed_row_is_parse_error() {
        let text = "\
BUS,id,is_substation,rating_kw,cap_q_kvar,controllable,pf
BUS,0,1,,0,0,1
BUS,1,0,fifty,0,1,1
";
        assert!(matches!(parse_network(text), Err(GridError::Parse { record: 3, .. })));
        let no_header = "BUS,0,1,,0,0,1\n";
        assert!(matches!(parse_network(no_header), Err(GridError::Parse { .. })));
    }

    #[test]
    fn unreachable_and_multiple_substations_reported() {
        let mut net = two_bus();
        let mut b = Bus::new(2);
        b.transformer_rating = Some(10.0);
        net.buses.push(b);
        let v: Vec<String> = validate_radial(&net).iter().map(|v| v.to_string()).collect();
        assert!(v.contains(&"bus 2 unreachable".to_string()), "{v:?}");

        let mut net = two_bus();
        net.buses[1].is_substation = true;
        let v: Vec<String> = validate_radial(&net).iter().map(|v| v.to_string()).collect();
        assert_eq!(v, vec!["multiple substations".to_string()]);
    }

    #[test]
    fn per_unit_conversion() {
        let mut raw = two_bus();
        raw.per_unit = false;
        raw.lines[0] = Line::new(0, 1, Complex64::new(0.423, 0.0));
        let pu = to_per_unit(&raw, 1.0, 4.16).unwrap();
        assert!((pu.lines[0].impedance.re - 0.423 / 17.3056).abs() < 1e-12);
        assert!((pu.lines[0].impedance.re - 0.024443).abs() < 1e-6);
        // flagged input is untouched
        assert_eq!(to_per_unit(&pu, 2.0, 12.47).unwrap(), pu);
        assert!(matches!(
            to_per_unit(&raw, 0.0, 4.16),
            Err(GridError::NonPositiveBase { .. })
        ));
        let back = to_ohms(&pu).unwrap();
        assert!((back.lines[0].impedance.re - 0.423).abs() < 1e-12);
    }

    #[test]
    fn regulator_columns() {
        let text = "\
BUS,id,is_substation,rating_kw,cap_q_kvar,controllable,pf
BUS,0,1,,0,0,1
BUS,1,0,50,30,1,1
LINE,from,to,r_pu,x_pu,reg_tapmin,reg_tapmax,reg_step,reg_unidir
LINE,0,1,0.01,0.02,-16,16,0.00625,1
";
        let net = parse_network(text).unwrap();
        let reg = net.lines[0].regulator.as_ref().unwrap();
        assert_eq!((reg.tap_min, reg.tap_max), (-16, 16));
        assert!(reg.unidirectional);
        assert!(net.buses[1].has_cap_bank);
        assert_eq!(parse_network(&write_network(&net)).unwrap(), net);
    }

    #[test]
    fn bundled_feeder_shape() {
        let net = feeder15();
        assert_eq!(net.n_buses(), 15);
        assert_eq!(net.lines.len(), 14);
        assert_eq!(net.substation(), Some(0));
        let topo = net.topology().unwrap();
        assert_eq!(topo.order.len(), 15);
    }
}
