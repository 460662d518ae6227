//! A non-learned reference forecaster: per (region, hour-of-day) empirical
//! quantiles over a trailing window of days.  Strong enough to be a fair
//! comparator for the evaluation pipeline, simple enough to be obviously
//! correct.



use crate::dataset::{Panel, HOURS_PER_DAY};
use crate::network::{ForecastBundle, OriginForecast};
use crate::{Error, Result};

/// Default trailing-window length in days: long enough for stable hourly
/// order statistics, short enough to track seasonal drift.
pub const DEFAULT_BASELINE_WINDOW: usize = 56;

/// Sorted per-(region, hour-of-day) histories over the trailing window
/// ending just before one forecast origin.
#[derive(Debug, Clone)]
pub struct SeasonalQuantileTable {
    origin: usize,
    window: usize,
    /// `buckets[region][hour]`, each sorted ascending with `window` entries.
    buckets: Vec<Vec<Vec<f64>>>,
}

impl SeasonalQuantileTable {
    /// Collects and sorts the `window` days before `origin` for every region
    /// and hour of day.
    pub fn build(panel: &Panel, origin: usize, window: usize) -> Result<SeasonalQuantileTable> {
        if window == 0 {
            return Err(Error::Config("baseline window must be at least 1 day".into()));
        }
        if origin < window {
            return Err(Error::Data(format!(
                "origin day {origin} has only {origin} days of history, the baseline needs \
                 {window}"
            )));
        }
        if origin > panel.days() {
            return Err(Error::Data(format!(
                "origin day {origin} lies outside the {}-day panel",
                panel.days()
            )));
        }
        let mut buckets = Vec::with_capacity(panel.regions().len());
        for region in 0..panel.regions().len() {
            let mut per_hour = vec![Vec::with_capacity(window); HOURS_PER_DAY];
            for day in origin - window..origin {
                let values = panel.day_slice(region, day);
                for (hour, bucket) in per_hour.iter_mut().enumerate() {
                    bucket.push(values[hour]);
                }
            }
            for bucket in &mut per_hour {
                bucket.sort_by(f64::total_cmp);
            }
            buckets.push(per_hour);
        }
        Ok(SeasonalQuantileTable {
            origin,
            window,
            buckets,
        })
    }

    pub fn origin(&self) -> usize {
        self.origin
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Empirical `q`-quantile of one bucket: position `q·(n−1)` with linear
    /// interpolation between the surrounding order statistics.
    pub fn quantile(&self, region: usize, hour: usize, q: f64) -> Result<f64> {
        if region >= self.buckets.len() {
            return Err(Error::Domain(format!(
                "region index {region} out of range for {} regions",
                self.buckets.len()
            )));
        }
        if hour >= HOURS_PER_DAY {
            return Err(Error::Domain(format!("hour {hour} out of range")));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!(
                "quantile level must lie in (0, 1), got {q}"
            )));
        }
        let bucket = &self.buckets[region][hour];
        let pos = q * (bucket.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let hi = (lo + 1).min(bucket.len() - 1);
        Ok(bucket[lo] * (1.0 - frac) + bucket[hi] * frac)
    }
}

/// The baseline forecast for one region and origin: each horizon step takes
/// the empirical `q`-quantile of its hour-of-day's trailing bucket, so the
/// pattern repeats daily across the horizon.
pub fn baseline_forecast(
    panel: &Panel,
    region: usize,
    origin: usize,
    q: f64,
    horizon_len: usize,
    window: usize,
) -> Result<Vec<f64>> {
    let table = SeasonalQuantileTable::build(panel, origin, window)?;
    (0..horizon_len)
        .map(|step| table.quantile(region, step % HOURS_PER_DAY, q))
        .collect()
}

/// Baseline forecasts for every region, origin, and level — shaped like the
/// model's output so the same CSV writer and evaluation pipeline apply.
/// Origins need not be contiguous.
pub fn baseline_bundle(
    panel: &Panel,
    origins: &[usize],
    levels: &[f64],
    horizon_len: usize,
    window: usize,
) -> Result<ForecastBundle> {
    if levels.is_empty() {
        return Err(Error::Domain("no quantile levels requested".into()));
    }
    let mut sorted: Vec<f64> = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let n_regions = panel.regions().len();
    let mut bundle_origins = Vec::with_capacity(origins.len());
    for &origin in origins {
        let table = SeasonalQuantileTable::build(panel, origin, window)?;
        let mut values = Vec::with_capacity(sorted.len());
        for &q in &sorted {
            let mut per_series = Vec::with_capacity(n_regions);
            for region in 0..n_regions {
                let horizon: Vec<f64> = (0..horizon_len)
                    .map(|step| table.quantile(region, step % HOURS_PER_DAY, q))
                    .collect::<Result<_>>()?;
                per_series.push(horizon);
            }
            values.push(per_series);
        }
        bundle_origins.push(OriginForecast {
            day: origin,
            date: panel.date_of_day(origin),
            values,
        });
    }
    Ok(ForecastBundle {
        regions: panel.regions().to_vec(),
        levels: sorted,
        horizon_len,
        origins: bundle_origins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_panel;
    use chrono::{DateTime, NaiveDate, Utc};

    fn test_start() -> DateTime<Utc> {
        NaiveDate::from_ymd_opt(2001, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
            .and_utc()
    }

    fn flat_panel(value: f64, days: usize) -> Panel {
        Panel::new(
            vec!["R01".into()],
            test_start(),
            vec![vec![value; days * HOURS_PER_DAY]],
        )
        .unwrap()
    }

    #[test]
    fn constant_history_forecasts_the_constant_at_every_level() {
        let panel = flat_panel(0.7, 60);
        for q in [0.01, 0.25, 0.5, 0.9, 0.999] {
            let f = baseline_forecast(&panel, 0, 58, q, 48, DEFAULT_BASELINE_WINDOW).unwrap();
            assert_eq!(f.len(), 48);
            assert!(f.iter().all(|&v| v == 0.7), "level {q}");
        }
    }

    #[test]
    fn interpolation_splits_a_two_value_bucket_at_the_midpoint() {
        // Two days of history alternating 0 and 1 per hour.
        let mut values = vec![0.0; 2 * HOURS_PER_DAY];
        values[HOURS_PER_DAY..].iter_mut().for_each(|v| *v = 1.0);
        let panel = Panel::new(vec!["R01".into()], test_start(), vec![values]).unwrap();
        let table = SeasonalQuantileTable::build(&panel, 2, 2).unwrap();
        assert_eq!(table.quantile(0, 0, 0.5).unwrap(), 0.5);
        assert_eq!(table.quantile(0, 5, 0.25).unwrap(), 0.25);
        // Extreme levels approach the bucket extremes from inside.
        assert!(table.quantile(0, 0, 0.999).unwrap() <= 1.0);
        assert!(table.quantile(0, 0, 0.999).unwrap() > 0.99);
    }

    #[test]
    fn quantiles_never_cross_in_q() {
        let panel = synth_panel(2, 1, 17).unwrap();
        let origin = 200;
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        for region in 0..2 {
            let rows: Vec<Vec<f64>> = grid
                .iter()
                .map(|&q| baseline_forecast(&panel, region, origin, q, 48, 56).unwrap())
                .collect();
            for step in 0..48 {
                for w in rows.windows(2) {
                    assert!(w[0][step] <= w[1][step]);
                }
            }
        }
    }

    #[test]
    fn day_order_inside_the_window_is_irrelevant() {
        let panel = synth_panel(1, 1, 23).unwrap();
        let origin = 100;
        let window = 14;
        let base = baseline_forecast(&panel, 0, origin, 0.4, 48, window).unwrap();
        // Rebuild the panel with the window's days permuted.
        let mut days: Vec<Vec<f64>> = (0..panel.days())
            .map(|d| panel.day_slice(0, d).to_vec())
            .collect();
        days[origin - window..origin].reverse();
        days[origin - window..origin].rotate_left(3);
        let shuffled = Panel::new(
            panel.regions().to_vec(),
            panel.start(),
            vec![days.concat()],
        )
        .unwrap();
        let permuted = baseline_forecast(&shuffled, 0, origin, 0.4, 48, window).unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn short_history_and_bad_levels_are_refused() {
        let panel = flat_panel(1.0, 30);
        assert!(baseline_forecast(&panel, 0, 20, 0.5, 48, 56).is_err());
        assert!(baseline_forecast(&panel, 0, 29, 0.0, 48, 14).is_err());
        assert!(baseline_forecast(&panel, 0, 29, 1.0, 48, 14).is_err());
        assert!(SeasonalQuantileTable::build(&panel, 29, 0).is_err());
        let table = SeasonalQuantileTable::build(&panel, 29, 14).unwrap();
        assert!(table.quantile(3, 0, 0.5).is_err());
        assert!(table.quantile(0, 24, 0.5).is_err());
    }

    #[test]
    fn bundles_cover_every_origin_region_and_level() {
        let panel = synth_panel(2, 1, 29).unwrap();
        let bundle = baseline_bundle(&panel, &[60, 61, 62], &[0.9, 0.1, 0.9], 48, 56).unwrap();
        assert_eq!(bundle.levels, vec![0.1, 0.9]);
        assert_eq!(bundle.origins.len(), 3);
        assert_eq!(bundle.horizon_len, 48);
        for of in &bundle.origins {
            assert_eq!(of.values.len(), 2);
            assert_eq!(of.values[0].len(), 2);
            assert_eq!(of.values[0][0].len(), 48);
            assert_eq!(of.date, panel.date_of_day(of.day));
        }
        // The hourly pattern repeats across the two horizon days.
        let first = &bundle.origins[0].values[0][0];
        assert_eq!(first[..24], first[24..]);
    }
}
