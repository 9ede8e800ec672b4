//! Day-ahead demand forecasts and the target bands fed to the scheduler.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{clear_sky, Timeseries};

pub const PERSISTENCE_DAYS: usize = 7;
pub const RESIDUAL_WINDOW: usize = 28;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("node {node}: {days} days of history, need at least {need}")]
    InsufficientHistory { node: usize, days: usize, need: usize },
    #[error("rating must be positive, got {0}")]
    Rating(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub node: usize,
    /// kW per hour of the next day.
    pub mean: Vec<f64>,
    pub error_std: Vec<f64>,
    pub pf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPair {
    pub node: usize,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
    pub base: Vec<f64>,
}

/// Produces a 24-hour forecast from whole days of history.
pub trait Forecaster {
    fn predict(&self, days: &[&[f64]]) -> Vec<f64>;
}

/// Same-hour mean of the last seven days.
#[derive(Debug, Clone, Copy, Default)]
pub struct SeasonalPersistence;

impl Forecaster for SeasonalPersistence {
    fn predict(&self, days: &[&[f64]]) -> Vec<f64> {
        let recent = &days[days.len().saturating_sub(PERSISTENCE_DAYS)..];
        (0..24)
            .map(|h| recent.iter().map(|d| d[h]).sum::<f64>() / recent.len() as f64)
            .collect()
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn forecast_day_ahead(history: &Timeseries, pf: f64) -> Result<Forecast, ForecastError> {
    forecast_with(&SeasonalPersistence, history, pf)
}

/// Forecast plus per-hour error std from out-of-sample residuals of the
/// last [`RESIDUAL_WINDOW`] days. With too few residual days the in-sample
/// spread of the persistence window is used instead.
pub fn forecast_with<F: Forecaster>(f: &F, history: &Timeseries, pf: f64) -> Result<Forecast, ForecastError> {
    let n = history.days();
    if n < PERSISTENCE_DAYS {
        return Err(ForecastError::InsufficientHistory {
            node: history.node_id,
            days: n,
            need: PERSISTENCE_DAYS,
        });
    }
    let days: Vec<&[f64]> = (0..n).map(|d| history.day(d)).collect();
    let mean = f.predict(&days);

    let first = PERSISTENCE_DAYS.max(n.saturating_sub(RESIDUAL_WINDOW));
    let mut residuals: Vec<Vec<f64>> = vec![Vec::new(); 24];
    for d in first..n {
        let pred = f.predict(&days[..d]);
        for h in 0..24 {
            residuals[h].push(days[d][h] - pred[h]);
        }
    }
    let error_std = if residuals[0].len() >= 2 {
        residuals.iter().map(|r| std_dev(r)).collect()
    } else {
        let recent = &days[n - PERSISTENCE_DAYS..];
        (0..24)
            .map(|h| std_dev(&recent.iter().map(|d| d[h]).collect::<Vec<_>>()))
            .collect()
    };
    Ok(Forecast {
        node: history.node_id,
        mean,
        error_std,
        pf,
    })
}

/// Clear-sky profile scaled by the trailing three-day ratio of observed to
/// clear-sky energy. `capacity` is the installed kW.
pub fn forecast_solar(observed: &[f64], capacity: f64) -> Vec<f64> {
    let days = observed.len() / 24;
    let clear: f64 = (0..24).map(clear_sky).sum::<f64>() * capacity;
    let ratio = if days == 0 || clear <= 0.0 {
        1.0
    } else {
        let k = days.min(3);
        let seen: f64 = observed[(days - k) * 24..days * 24].iter().sum();
        seen / (clear * k as f64)
    };
    (0..24).map(|h| capacity * clear_sky(h) * ratio).collect()
}

/// Upper/lower targets: net forecast (demand minus solar) ± one error std,
/// clipped to the two-way rating.
pub fn build_targets(fc: &Forecast, solar: &[f64], rating: f64) -> Result<TargetPair, ForecastError> {
    if !(rating > 0.0) {
        return Err(ForecastError::Rating(rating));
    }
    let base: Vec<f64> = fc
        .mean
        .iter()
        .enumerate()
        .map(|(h, m)| m - solar.get(h).copied().unwrap_or(0.0))
        .collect();
    let upper = base
        .iter()
        .zip(&fc.error_std)
        .map(|(b, s)| (b + s).min(rating))
        .collect();
    let lower = base
        .iter()
        .zip(&fc.error_std)
        .map(|(b, s)| (b - s).max(-rating))
        .collect();
    Ok(TargetPair {
        node: fc.node,
        upper,
        lower,
        base,
    })
}

pub fn write_forecasts_csv<W: Write>(out: W, fcs: &[Forecast]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "hour", "mean_kw", "std_kw"])?;
    for fc in fcs {
        for h in 0..fc.mean.len() {
            w.write_record([
                fc.node.to_string(),
                h.to_string(),
                format!("{:.6}", fc.mean[h]),
                format!("{:.6}", fc.error_std[h]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::default_start;

    fn series(values: Vec<f64>) -> Timeseries {
        Timeseries::new(4, default_start(), values).unwrap()
    }

    #[test]
    fn constant_history() {
        let fc = forecast_day_ahead(&series(vec![5.0; 24 * 10]), 0.95).unwrap();
        assert!(fc.mean.iter().all(|m| (m - 5.0).abs() < 1e-12));
        assert!(fc.error_std.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn periodic_history() {
        let pattern: Vec<f64> = (0..24).map(|h| 2.0 + (h as f64 / 3.0).sin()).collect();
        let values = pattern.iter().cycle().take(24 * 9).copied().collect();
        let fc = forecast_day_ahead(&series(values), 0.95).unwrap();
        for h in 0..24 {
            assert!((fc.mean[h] - pattern[h]).abs() < 1e-12);
        }
    }

    #[test]
    fn short_history_rejected() {
        assert!(matches!(
            forecast_day_ahead(&series(vec![1.0; 24 * 6]), 0.95),
            Err(ForecastError::InsufficientHistory { days: 6, .. })
        ));
    }

    #[test]
    fn target_examples() {
        let fc = |m: f64, s: f64| Forecast {
            node: 1,
            mean: vec![m],
            error_std: vec![s],
            pf: 1.0,
        };
        let t = build_targets(&fc(10.0, 2.0), &[], 50.0).unwrap();
        assert_eq!((t.upper[0], t.lower[0]), (12.0, 8.0));
        let t = build_targets(&fc(49.0, 5.0), &[], 50.0).unwrap();
        assert_eq!((t.upper[0], t.lower[0]), (50.0, 44.0));
        let t = build_targets(&fc(7.0, 0.0), &[], 50.0).unwrap();
        assert_eq!((t.upper[0], t.lower[0], t.base[0]), (7.0, 7.0, 7.0));
        let t = build_targets(&fc(7.0, 1.0), &[10.0], 50.0).unwrap();
        assert_eq!((t.upper[0], t.lower[0], t.base[0]), (-2.0, -4.0, -3.0));
        assert!(build_targets(&fc(1.0, 1.0), &[], 0.0).is_err());
    }

    #[test]
    fn solar_forecast_tracks_recent_ratio() {
        let obs: Vec<f64> = (0..24 * 5).map(|h| 8.0 * 0.5 * clear_sky(h)).collect();
        let f = forecast_solar(&obs, 8.0);
        for h in 0..24 {
            assert!((f[h] - 4.0 * clear_sky(h)).abs() < 1e-12);
        }
    }
}
