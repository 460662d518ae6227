//! Panels of aligned hourly series: loading, splitting, segmentation,
//! normalization, and a synthetic solar-style generator.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDate, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Hours per day; the native resolution of every panel.
pub const HOURS_PER_DAY: usize = 24;

/// A dense, aligned panel: every region carries a value for every hour.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    regions: Vec<String>,
    start: DateTime<Utc>,
    /// `values[region][hour]`, row per region, hourly from `start`.
    values: Vec<Vec<f64>>,
}

impl Panel {
    pub fn new(regions: Vec<String>, start: DateTime<Utc>, values: Vec<Vec<f64>>) -> Result<Self> {
        if regions.is_empty() || regions.len() != values.len() {
            return Err(Error::Data("panel needs one value row per region".into()));
        }
        let hours = values[0].len();
        if values.iter().any(|v| v.len() != hours) {
            return Err(Error::Data("panel rows have unequal lengths".into()));
        }
        Ok(Panel { regions, start, values })
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn hours(&self) -> usize {
        self.values[0].len()
    }

    /// Number of complete days.
    pub fn days(&self) -> usize {
        self.hours() / HOURS_PER_DAY
    }

    pub fn series(&self, region: usize) -> &[f64] {
        &self.values[region]
    }

    pub fn region_index(&self, id: &str) -> Option<usize> {
        self.regions.iter().position(|r| r == id)
    }

    /// Calendar date at the start of day `d`.
    pub fn date_of_day(&self, d: usize) -> NaiveDate {
        (self.start + Duration::days(d as i64)).date_naive()
    }

    /// Day index whose date is `date`, if inside the panel.
    pub fn day_of_date(&self, date: NaiveDate) -> Option<usize> {
        let delta = (date - self.start.date_naive()).num_days();
        if delta >= 0 && (delta as usize) < self.days() {
            Some(delta as usize)
        } else {
            None
        }
    }

    /// The 24 values of day `d` for one region.
    pub fn day_slice(&self, region: usize, d: usize) -> &[f64] {
        &self.values[region][d * HOURS_PER_DAY..(d + 1) * HOURS_PER_DAY]
    }
}

// ── CSV interchange ─────────────────────────────────────────────────────────

/// Loads a `time,region_id,value` CSV into a dense panel.
///
/// Rows may arrive in any order. Regions are sorted lexicographically.
/// Timestamps must be ISO-8601 UTC on exact hours with no gaps; values must
/// be finite and inside [0,1]. Duplicate `(time, region)` pairs and missing
/// cells are reported explicitly.
pub fn load_panel(path: &Path) -> Result<Panel> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot open panel {}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("panel {}: {e}", path.display())))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("panel {} lacks column '{name}'", path.display())))
    };
    let (tc, rc, vc) = (col("time")?, col("region_id")?, col("value")?);

    let mut rows: Vec<(DateTime<Utc>, String, f64)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2; // header is line 1
        let rec = rec.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        let ts = DateTime::parse_from_rfc3339(&rec[tc])
            .map_err(|e| Error::Data(format!("line {line}: bad timestamp '{}': {e}", &rec[tc])))?
            .with_timezone(&Utc);
        if ts.timestamp() % 3600 != 0 {
            return Err(Error::Data(format!("line {line}: timestamp {ts} is not on an exact hour")));
        }
        let value: f64 = rec[vc]
            .parse()
            .map_err(|e| Error::Data(format!("line {line}: bad value '{}': {e}", &rec[vc])))?;
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(Error::Data(format!("line {line}: value {value} outside [0,1]")));
        }
        rows.push((ts, rec[rc].to_string(), value));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("panel {} has no data rows", path.display())));
    }

    let mut regions: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
    regions.sort();
    regions.dedup();
    let start = rows.iter().map(|r| r.0).min().unwrap();
    let end = rows.iter().map(|r| r.0).max().unwrap();
    let hours = ((end - start).num_seconds() / 3600 + 1) as usize;

    let mut values = vec![vec![f64::NAN; hours]; regions.len()];
    for (ts, region, value) in &rows {
        let h = ((*ts - start).num_seconds() / 3600) as usize;
        let r = regions.binary_search(region).expect("region collected above");
        if !values[r][h].is_nan() {
            return Err(Error::Data(format!("duplicate cell ({ts}, {region})")));
        }
        values[r][h] = *value;
    }

    let mut gaps = Vec::new();
    for (r, row) in values.iter().enumerate() {
        for (h, v) in row.iter().enumerate() {
            if v.is_nan() {
                if gaps.len() < 5 {
                    gaps.push(format!("({}, {})", start + Duration::hours(h as i64), regions[r]));
                } else {
                    gaps.push("…".into());
                    break;
                }
            }
        }
        if gaps.last().map(|s| s == "…").unwrap_or(false) {
            break;
        }
    }
    if !gaps.is_empty() {
        return Err(Error::Data(format!("panel has missing cells: {}", gaps.join(", "))));
    }

    Panel::new(regions, start, values)
}

/// Writes a panel as `time,region_id,value` sorted by (time, region).
/// Values are printed with six decimals, which is exact for generator output.
pub fn save_panel(panel: &Panel, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(panel.hours() * panel.regions.len() * 40);
    writeln!(&mut out, "time,region_id,value")?;
    for h in 0..panel.hours() {
        let ts = panel.start + Duration::hours(h as i64);
        let stamp = ts.format("%Y-%m-%dT%H:%M:%SZ");
        for (r, region) in panel.regions.iter().enumerate() {
            writeln!(&mut out, "{stamp},{region},{:.6}", panel.values[r][h])?;
        }
    }
    crate::atomic_write(path, &out)
}

// ── Splits and segmentation ─────────────────────────────────────────────────

/// Contiguous day-index ranges for train/validation/test.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

/// Splits a panel chronologically. Each bound is an exclusive upper date:
/// a day belongs to train when its date precedes `train_end`, and so on.
pub fn chrono_split(
    panel: &Panel,
    train_end: NaiveDate,
    valid_end: NaiveDate,
    test_end: NaiveDate,
) -> Result<Split> {
    if !(train_end <= valid_end && valid_end <= test_end) {
        return Err(Error::Config(format!(
            "split bounds must be ordered: {train_end} / {valid_end} / {test_end}"
        )));
    }
    let bound = |date: NaiveDate| -> usize {
        let delta = (date - panel.start.date_naive()).num_days();
        delta.clamp(0, panel.days() as i64) as usize
    };
    let (b1, b2, b3) = (bound(train_end), bound(valid_end), bound(test_end));
    Ok(Split { train: 0..b1, valid: b1..b2, test: b2..b3 })
}

/// Forecast origins (first-target-day indices) whose target days all lie in
/// `days` and whose input window fits inside the panel. A window whose
/// targets straddle a split boundary belongs to no range and is dropped.
pub fn origins_in(days: &Range<usize>, input_days: usize, horizon_days: usize) -> Range<usize> {
    let lo = days.start.max(input_days);
    let hi = (days.end + 1).saturating_sub(horizon_days).max(lo);
    lo..hi
}

/// One raw training/inference window: `x` spans the input days, `y` the
/// target days, both hourly.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Cuts the window with first target day `origin` from an hourly series.
pub fn segment(series: &[f64], origin: usize, input_days: usize, horizon_days: usize) -> Result<Segment> {
    if origin < input_days {
        return Err(Error::Data(format!(
            "origin day {origin} leaves less than {input_days} input days"
        )));
    }
    let end = (origin + horizon_days) * HOURS_PER_DAY;
    if end > series.len() {
        return Err(Error::Data(format!(
            "origin day {origin} with horizon {horizon_days} overruns the series"
        )));
    }
    let xs = (origin - input_days) * HOURS_PER_DAY;
    let ys = origin * HOURS_PER_DAY;
    Ok(Segment { x: series[xs..ys].to_vec(), y: series[ys..end].to_vec() })
}

/// Divides by the input-window mean. An all-zero window maps to zeros with
/// `z̄ₓ = 0`; callers skip such windows in training and emit a zero forecast
/// at inference.
pub fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let zbar = x.iter().sum::<f64>() / x.len() as f64;
    if zbar == 0.0 {
        (vec![0.0; x.len()], 0.0)
    } else {
        (x.iter().map(|v| v / zbar).collect(), zbar)
    }
}

pub fn denormalize(y_prime: &[f64], zbar: f64) -> Vec<f64> {
    y_prime.iter().map(|v| v * zbar).collect()
}

/// Evaluation mask: only strictly positive targets are scored.
pub fn positive_mask(y: &[f64]) -> Vec<bool> {
    y.iter().map(|&v| v > 0.0).collect()
}

// ── Synthetic panel ─────────────────────────────────────────────────────────

/// Deterministic solar-style panel generator.
///
/// `value(t) = clip₀¹(cap_r · S(hour) · A(doy) · C_r(t))` where `S` is the
/// diurnal arc `max(0, sin(π(hour−6)/12))`, `A` the seasonal amplitude
/// `0.35 + 0.3·sin(2π(doy−81)/365.25)`, and `C_r` a lognormal cloud process
/// with a daily factor shared across regions (AR(1) across days, so recent
/// weather is informative), a per-region daily deviation, and a small
/// per-region hourly AR(1). The shared factor is what makes one region's
/// window useful context for another's forecast.
pub fn synth_panel(n_regions: usize, years: usize, seed: u64) -> Result<Panel> {
    if n_regions == 0 || years == 0 {
        return Err(Error::Config("synthetic panel needs at least 1 region and 1 year".into()));
    }
    const SIG_G: f64 = 0.4; // shared daily factor, log scale
    const RHO_G: f64 = 0.8; // day-to-day persistence of the shared factor
    const SIG_E: f64 = 0.25; // per-region daily deviation
    const SIG_W: f64 = 0.15; // per-region hourly noise
    const RHO_W: f64 = 0.9; // hour-to-hour persistence
    const MU_C: f64 = -0.1; // log-scale location of the cloud multiplier

    let start_date = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
    let end_date = NaiveDate::from_ymd_opt(2001 + years as i32, 1, 1).unwrap();
    let n_days = (end_date - start_date).num_days() as usize;
    let start = start_date.and_hms_opt(0, 0, 0).unwrap().and_utc();

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let width = n_regions.to_string().len().max(2);
    let regions: Vec<String> = (1..=n_regions).map(|i| format!("R{i:0width$}")).collect();
    let caps: Vec<f64> = (0..n_regions).map(|_| rng.gen_range(0.7..1.0)).collect();

    let mut values = vec![vec![0.0f64; n_days * HOURS_PER_DAY]; n_regions];
    let mut g = SIG_G * rng.sample::<f64, _>(StandardNormal);
    let mut w = vec![0.0f64; n_regions];
    for d in 0..n_days {
        if d > 0 {
            g = RHO_G * g + SIG_G * (1.0 - RHO_G * RHO_G).sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        let mut e = vec![0.0f64; n_regions];
        for er in e.iter_mut() {
            *er = SIG_E * rng.sample::<f64, _>(StandardNormal);
        }
        let date = start_date + Duration::days(d as i64);
        let doy = date.ordinal() as f64;
        let season = 0.35 + 0.3 * (std::f64::consts::TAU * (doy - 81.0) / 365.25).sin();
        for r in 0..n_regions {
            for hour in 0..HOURS_PER_DAY {
                w[r] = RHO_W * w[r]
                    + SIG_W * (1.0 - RHO_W * RHO_W).sqrt() * rng.sample::<f64, _>(StandardNormal);
                let sun = (std::f64::consts::PI * (hour as f64 - 6.0) / 12.0).sin().max(0.0);
                let cloud = (MU_C + g + e[r] + w[r]).exp();
                let v = (caps[r] * sun * season * cloud).clamp(0.0, 1.0);
                values[r][d * HOURS_PER_DAY + hour] = v;
            }
        }
    }
    Panel::new(regions, start, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn segment_splits_input_and_target_days() {
        // six days of data; origin at day 4 → x covers days 0..4, y days 4..6
        let series: Vec<f64> = (0..6 * 24).map(|i| i as f64 / 1000.0).collect();
        let seg = segment(&series, 4, 4, 2).unwrap();
        assert_eq!(seg.x.len(), 96);
        assert_eq!(seg.y.len(), 48);
        assert_eq!(seg.x[0], 0.0);
        assert_eq!(seg.y[0], series[96]);
        assert!(segment(&series, 3, 4, 2).is_err());
        assert!(segment(&series, 5, 4, 2).is_err());
    }

    #[test]
    fn normalize_examples() {
        let (x, zbar) = normalize(&[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(zbar, 2.0);
        assert_eq!(x, vec![1.0, 1.0, 1.0, 1.0]);
        let (x0, z0) = normalize(&[0.0, 0.0]);
        assert_eq!(z0, 0.0);
        assert_eq!(x0, vec![0.0, 0.0]);
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let raw = vec![0.3, 0.0, 0.9, 0.42];
        let (x, zbar) = normalize(&raw);
        let back = denormalize(&x, zbar);
        for (a, b) in raw.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn positive_mask_excludes_zeros() {
        assert_eq!(positive_mask(&[0.0, 0.1, 0.0, 0.4]), vec![false, true, false, true]);
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let a = synth_panel(3, 1, 7).unwrap();
        let b = synth_panel(3, 1, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_panel(3, 1, 8).unwrap();
        assert_ne!(a, c);
        for r in 0..3 {
            assert!(a.series(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn synth_midnight_is_dark() {
        let p = synth_panel(2, 1, 3).unwrap();
        for d in 0..p.days() {
            assert_eq!(p.day_slice(0, d)[0], 0.0);
            assert_eq!(p.day_slice(1, d)[3], 0.0);
        }
    }

    #[test]
    fn synth_regions_share_weather() {
        let p = synth_panel(2, 1, 42).unwrap();
        let daily = |r: usize| -> Vec<f64> {
            (0..p.days()).map(|d| p.day_slice(r, d).iter().sum::<f64>() / 24.0).collect()
        };
        let (a, b) = (daily(0), daily(1));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        let corr = cov / (va * vb).sqrt();
        assert!(corr > 0.5, "cross-region daily correlation {corr}");
    }

    #[test]
    fn synth_calendar_handles_leap_years() {
        let p = synth_panel(1, 4, 1).unwrap();
        assert_eq!(p.days(), 365 * 3 + 366); // 2001-2004 includes one leap year
        assert_eq!(p.date_of_day(0), NaiveDate::from_ymd_opt(2001, 1, 1).unwrap());
    }

    #[test]
    fn split_follows_target_day_dates() {
        let p = synth_panel(1, 4, 1).unwrap();
        let split = chrono_split(
            &p,
            NaiveDate::from_ymd_opt(2003, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(2004, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(2005, 1, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(split.train, 0..730);
        assert_eq!(split.valid, 730..1095);
        assert_eq!(split.test, 1095..1461);
    }

    #[test]
    fn origin_ranges_keep_targets_inside_one_range() {
        // valid days 730..1095, m=4, h=2
        let o = origins_in(&(730..1095), 4, 2);
        assert_eq!(o, 730..1094);
        // first origin's inputs reach into the train range — that is fine
        // last admissible origin: targets 1093, 1094 both < 1095
        // origin 1094 would straddle the boundary and is dropped
        let o0 = origins_in(&(0..10), 4, 2);
        assert_eq!(o0, 4..9);
    }

    #[test]
    fn csv_roundtrip_preserves_panel() {
        let p = synth_panel(2, 1, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        save_panel(&p, &path).unwrap();
        let q = load_panel(&path).unwrap();
        assert_eq!(p.regions(), q.regions());
        assert_eq!(p.start(), q.start());
        assert_eq!(p.hours(), q.hours());
        // six printed decimals round-trip to within 5e-7
        for r in 0..2 {
            for (a, b) in p.series(r).iter().zip(q.series(r)) {
                assert!((a - b).abs() <= 5e-7);
            }
        }
    }

    #[test]
    fn csv_errors_are_specific() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, body: &str| {
            let path = dir.path().join(name);
            std::fs::write(&path, body).unwrap();
            path
        };
        let bad_value = write(
            "bad_value.csv",
            "time,region_id,value\n2001-01-01T00:00:00Z,R1,1.5\n",
        );
        let err = load_panel(&bad_value).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("1.5"), "{err}");

        let dup = write(
            "dup.csv",
            "time,region_id,value\n2001-01-01T00:00:00Z,R1,0.5\n2001-01-01T00:00:00Z,R1,0.5\n",
        );
        let err = load_panel(&dup).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");

        let gap = write(
            "gap.csv",
            "time,region_id,value\n2001-01-01T00:00:00Z,R1,0.5\n2001-01-01T02:00:00Z,R1,0.5\n",
        );
        let err = load_panel(&gap).unwrap_err().to_string();
        assert!(err.contains("missing") && err.contains("01:00:00"), "{err}");

        let offgrid = write(
            "offgrid.csv",
            "time,region_id,value\n2001-01-01T00:30:00Z,R1,0.5\n",
        );
        let err = load_panel(&offgrid).unwrap_err().to_string();
        assert!(err.contains("exact hour"), "{err}");
    }
}
