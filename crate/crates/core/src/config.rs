//! Versioned JSON run configuration with dotted-path overrides.
//!
//! The document is a [`RunConfig`] plus three top-level keys of its own:
//! `version`, `network` (optional feeder CSV path) and `sweep` (storage
//! penetrations for the sweep command). Every error names the offending
//! field path, e.g. `penetrations.solar`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::grid::{feeder15, load_network, GridError, RadialNetwork};
use crate::harness::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Field { path: String, msg: String },
    #[error("override '{0}' is not of the form key=value")]
    OverrideSyntax(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
}

fn field(path: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        path: path.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub version: u32,
    /// Feeder CSV; the bundled 15-bus feeder when absent.
    pub network: Option<PathBuf>,
    /// Storage penetrations (%) visited by `sweep`.
    pub sweep: Vec<f64>,
    pub run: RunConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            version: SCHEMA_VERSION,
            network: None,
            sweep: vec![0.0, 10.0, 20.0, 30.0],
            run: RunConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
        Self::load_with(path, &[])
    }

    /// Reads `path`, applies `key=value` overrides, then validates.
    pub fn load_with(path: impl AsRef<Path>, overrides: &[String]) -> Result<Config, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_value(serde_json::from_str(&text)?, overrides)?;
        // relative network paths resolve against the config file
        if let (Some(net), Some(dir)) = (&cfg.network, path.parent()) {
            if net.is_relative() {
                cfg.network = Some(dir.join(net));
            }
        }
        Ok(cfg)
    }

    /// Defaults plus overrides, for runs without a config file.
    pub fn defaults_with(overrides: &[String]) -> Result<Config, ConfigError> {
        Self::from_value(Config::default().to_value(), overrides)
    }

    pub fn from_value(mut doc: Value, overrides: &[String]) -> Result<Config, ConfigError> {
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let Value::Object(mut map) = doc else {
            return Err(field("", "expected a JSON object"));
        };
        let version = match map.remove("version") {
            None => return Err(field("version", "missing (current schema is 1)")),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| field("version", "expected an integer"))?,
        };
        if version != SCHEMA_VERSION as u64 {
            return Err(field(
                "version",
                format!("unsupported schema version {version}, expected {SCHEMA_VERSION}"),
            ));
        }
        let network = match map.remove("network") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(field("network", "expected a file path string")),
        };
        let sweep = match map.remove("sweep") {
            None => Config::default().sweep,
            Some(v) => serde_json::from_value(v).map_err(|e| field("sweep", e.to_string()))?,
        };
        let run: RunConfig = serde_path_to_error::deserialize(Value::Object(map)).map_err(|e| {
            let path = e.path().to_string();
            field(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        let cfg = Config {
            version: version as u32,
            network,
            sweep,
            run,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        let mut map = match serde_json::to_value(&self.run).expect("run config serializes") {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        map.insert("version".into(), Value::from(self.version));
        map.insert(
            "network".into(),
            self.network
                .as_ref()
                .map_or(Value::Null, |p| Value::String(p.display().to_string())),
        );
        map.insert("sweep".into(), serde_json::to_value(&self.sweep).expect("floats serialize"));
        Value::Object(map)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("config serializes")
    }

    pub fn network(&self) -> Result<RadialNetwork, ConfigError> {
        match &self.network {
            Some(p) => Ok(load_network(p)?),
            None => Ok(feeder15()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.run;
        let pct = |name: &str, v: f64| {
            if (0.0..=100.0).contains(&v) {
                Ok(())
            } else {
                Err(field(name, format!("{v} is outside [0, 100]")))
            }
        };
        pct("penetrations.solar", r.penetrations.solar)?;
        pct("penetrations.storage", r.penetrations.storage)?;
        pct("penetrations.ev", r.penetrations.ev)?;
        for (i, p) in self.sweep.iter().enumerate() {
            pct(&format!("sweep[{i}]"), *p)?;
        }
        if self.sweep.is_empty() {
            return Err(field("sweep", "needs at least one penetration"));
        }
        if r.days == 0 {
            return Err(field("days", "must be at least 1"));
        }
        if r.warmup_days < crate::forecast::PERSISTENCE_DAYS {
            return Err(field(
                "warmup_days",
                format!("must be at least {}", crate::forecast::PERSISTENCE_DAYS),
            ));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(field(name, format!("must be positive, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(field(name, format!("must be non-negative, got {v}")))
            }
        };
        positive("rating_multiplier", r.rating_multiplier)?;
        non_negative("sigma_scale", r.sigma_scale)?;
        non_negative("gc.lambda_v", r.gc.lambda_v)?;
        non_negative("gc.lambda_d", r.gc.lambda_d)?;
        non_negative("gc.loss_weight", r.gc.loss_weight)?;
        positive("gc.tol", r.gc.tol)?;
        if !(r.gc.vband.0 < r.gc.vband.1) {
            return Err(field("gc.vband", "lower limit must be below upper limit"));
        }
        non_negative("lc.lambda_bounds", r.lc.lambda_bounds)?;
        non_negative("lc.ev_lambda_b", r.lc.ev_lambda_b)?;
        positive("lc.tol", r.lc.tol)?;
        if r.lc.horizon == 0 {
            return Err(field("lc.horizon", "must be at least 1"));
        }
        if !(r.lc.ev_gamma_c > 0.0 && r.lc.ev_gamma_c <= 1.0) {
            return Err(field("lc.ev_gamma_c", "must lie in (0, 1]"));
        }
        let s = &r.storage;
        positive("storage.duration_h", s.duration_h)?;
        if !(s.gamma_l > 0.0 && s.gamma_l <= 1.0) {
            return Err(field("storage.gamma_l", "must lie in (0, 1]"));
        }
        if !(s.gamma_c > 0.0 && s.gamma_c <= 1.0) {
            return Err(field("storage.gamma_c", "must lie in (0, 1]"));
        }
        if !(s.gamma_d >= 1.0) {
            return Err(field("storage.gamma_d", "must be at least 1"));
        }
        non_negative("storage.lambda_b", s.lambda_b)?;
        if !(0.0..=1.0).contains(&s.initial_soc) {
            return Err(field("storage.initial_soc", "must lie in [0, 1]"));
        }
        non_negative("tariff.peak_price", r.tariff.peak_price)?;
        non_negative("tariff.offpeak_price", r.tariff.offpeak_price)?;
        if !(r.tariff.peak_start <= r.tariff.peak_end && r.tariff.peak_end <= 24) {
            return Err(field("tariff.peak_end", "peak window must satisfy peak_start <= peak_end <= 24"));
        }
        r.gmm.validate().map_err(|e| field("gmm", e.to_string()))?;
        r.validate().map_err(|e| field("", e.to_string()))?;
        Ok(())
    }
}

/// Sets `a.b.c=value` in `doc`. The value is parsed as JSON when possible
/// and taken as a string otherwise. Intermediate objects must exist, so a
/// misspelt key is reported instead of silently added.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::OverrideSyntax(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::OverrideSyntax(spec.to_string()));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        let last = i + 1 == parts.len();
        match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                cur = map
                    .get_mut(*part)
                    .ok_or_else(|| field(here, "no such section"))?;
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| field(here.clone(), "expected an array index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| field(here, format!("index out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                cur = slot;
            }
            _ => return Err(field(here, "cannot descend into a scalar")),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ov(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        let back = Config::from_value(cfg.to_value(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_document() {
        let cfg = Config::from_value(json!({"version": 1, "seed": 7}), &[]).unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.run.days, RunConfig::default().days);
    }

    #[test]
    fn penetration_out_of_range_names_field() {
        let err = Config::defaults_with(&ov(&["penetrations.solar=150"])).unwrap_err();
        assert!(err.to_string().starts_with("penetrations.solar:"), "{err}");
    }

    #[test]
    fn unknown_key_names_field() {
        let err = Config::from_value(json!({"version": 1, "gc": {"lambda_q": 1.0}}), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("gc"), "{msg}");
        assert!(msg.contains("lambda_q"), "{msg}");
    }

    #[test]
    fn wrong_type_names_field() {
        let err = Config::from_value(json!({"version": 1, "lc": {"horizon": "long"}}), &[]).unwrap_err();
        assert!(err.to_string().starts_with("lc.horizon:"), "{err}");
    }

    #[test]
    fn version_is_checked() {
        assert!(Config::from_value(json!({"seed": 1}), &[]).is_err());
        let err = Config::from_value(json!({"version": 2}), &[]).unwrap_err();
        assert!(err.to_string().starts_with("version:"));
    }

    #[test]
    fn overrides() {
        let cfg = Config::defaults_with(&ov(&["seed=7", "mode=no_bounds", "gc.lambda_d=0", "sweep=[5]"])).unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.run.mode, crate::harness::Mode::NoBounds);
        assert_eq!(cfg.run.gc.lambda_d, 0.0);
        assert_eq!(cfg.sweep, vec![5.0]);
        assert!(matches!(
            Config::defaults_with(&ov(&["seed"])),
            Err(ConfigError::OverrideSyntax(_))
        ));
        let err = Config::defaults_with(&ov(&["nosuch.key=1"])).unwrap_err();
        assert!(err.to_string().starts_with("nosuch:"), "{err}");
    }
}
