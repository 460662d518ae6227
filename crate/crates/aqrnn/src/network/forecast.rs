//! Rolling inference: warm the recurrent tracks on the days before the first
//! origin, emit blended any-quantile forecasts per origin, and write them to
//! the forecast CSV.
//!
//! The context track does not depend on the quantile level, so it is rolled
//! once per model and its adapted output reused by every level.  Levels are
//! independent after that and run on worker threads.

use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;

use crate::autodiff::{EvalExec, Exec, Tensor};
use crate::dataset::Panel;
use crate::{parallel_map_indexed, Error, Result};

use super::run::{ModelRun, StepBatch, StepInputs};
use super::{week_index, Model};

/// Forecasts for one origin day: `values[level][series]` holds the
/// denormalized horizon.
#[derive(Debug, Clone)]
pub struct OriginForecast {
    /// Day index of the first forecast day.
    pub day: usize,
    /// Calendar date of that day.
    pub date: NaiveDate,
    pub values: Vec<Vec<Vec<f64>>>,
}

/// Blended forecasts for a set of origin days and quantile levels.
/// `levels` is sorted ascending and deduplicated.
#[derive(Debug, Clone)]
pub struct ForecastBundle {
    pub regions: Vec<String>,
    pub levels: Vec<f64>,
    pub horizon_len: usize,
    pub origins: Vec<OriginForecast>,
}

/// Rolls the model over `origins` and returns blended forecasts for every
/// region at every requested quantile level.
///
/// The recurrent state is warmed on up to `max_dilation` days before the
/// first origin (clamped to the available history).  With `monotone` set,
/// each coordinate's values are sorted across levels afterwards, which
/// removes any residual quantile crossing.
pub fn forecast_range(
    model: &Model,
    panel: &Panel,
    origins: Range<usize>,
    levels: &[f64],
    monotone: bool,
    max_threads: usize,
) -> Result<ForecastBundle> {
    let cfg = model.config();
    if panel.regions() != model.regions() {
        return Err(Error::Data(format!(
            "panel regions {:?} do not match the model's regions {:?}",
            panel.regions(),
            model.regions()
        )));
    }
    if origins.is_empty() {
        return Err(Error::Config("no origin days requested".into()));
    }
    let m = cfg.input_days;
    if origins.start < m || origins.end > panel.days() + 1 {
        return Err(Error::Data(format!(
            "origin days {}..{} need {m} input days inside the panel of {} days",
            origins.start,
            origins.end,
            panel.days()
        )));
    }
    if levels.is_empty() {
        return Err(Error::Config(
            "at least one quantile level is required".into(),
        ));
    }
    for &q in levels {
        model.subranges().weights(q)?;
    }
    let mut levels = levels.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();

    let n_series = panel.regions().len();
    let first_step = origins.start.saturating_sub(cfg.max_dilation()).max(m);
    let all: Vec<usize> = (0..n_series).collect();
    let steps: Vec<StepBatch> = (first_step..origins.end)
        .map(|o| StepBatch::assemble(panel, cfg, &all, o))
        .collect::<Result<_>>()?;

    // One level-independent context pass shared by every level.
    let r_primes: Vec<Tensor> = if cfg.no_context {
        Vec::new()
    } else {
        let mut ex = EvalExec::new();
        let mut run = ModelRun::new(model, &mut ex);
        let mut out = Vec::with_capacity(steps.len());
        for sb in &steps {
            let r = run.context_step(&mut ex, sb)?;
            out.push(ex.value(&r).clone());
        }
        out
    };

    let results = parallel_map_indexed(levels.clone(), max_threads, |_, q| {
        level_pass(model, &steps, &r_primes, origins.clone(), q)
    });
    let mut per_level = Vec::with_capacity(results.len());
    for r in results {
        per_level.push(r?);
    }

    let mut out_origins = Vec::with_capacity(origins.len());
    for (o_idx, day) in origins.clone().enumerate() {
        let values: Vec<Vec<Vec<f64>>> = per_level.iter().map(|lvl| lvl[o_idx].clone()).collect();
        out_origins.push(OriginForecast {
            day,
            date: panel.date_of_day(day),
            values,
        });
    }

    if monotone {
        let h_len = cfg.horizon_len();
        for of in &mut out_origins {
            for s in 0..n_series {
                for step in 0..h_len {
                    let mut col: Vec<f64> =
                        (0..levels.len()).map(|li| of.values[li][s][step]).collect();
                    col.sort_by(f64::total_cmp);
                    for (li, v) in col.into_iter().enumerate() {
                        of.values[li][s][step] = v;
                    }
                }
            }
        }
    }

    Ok(ForecastBundle {
        regions: panel.regions().to_vec(),
        levels,
        horizon_len: cfg.horizon_len(),
        origins: out_origins,
    })
}

/// Rolls the teams one quantile level touches and returns denormalized
/// forecasts `[origin][series][step]`.
fn level_pass(
    model: &Model,
    steps: &[StepBatch],
    r_primes: &[Tensor],
    origins: Range<usize>,
    q: f64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let cfg = model.config();
    let n_series = model.regions().len();
    let h_len = cfg.horizon_len();
    let k = cfg.selected();
    let weights = model.subranges().weights(q)?;
    let first_step = steps[0].origin;

    let mut ex = EvalExec::new();
    let mut run = ModelRun::new(model, &mut ex);
    let q_row_t = Tensor::filled(&[1, n_series], q);
    let mut acc = vec![vec![vec![0.0; h_len]; n_series]; origins.len()];

    for &(sub, w) in &weights {
        for (idx, sb) in steps.iter().enumerate() {
            let inputs = run.primary_inputs(&mut ex, sb)?;
            let q_row = ex.constant(q_row_t.clone());
            let r_prime = if cfg.no_context {
                ex.constant(Tensor::zeros(&[cfg.embedded_context, n_series]))
            } else {
                ex.constant(r_primes[idx].clone())
            };
            let pairs = run.team_step(&mut ex, sub, &inputs, &q_row, &r_prime, sb.origin)?;
            if sb.origin < origins.start {
                continue;
            }
            let o_idx = sb.origin - origins.start;
            let confs: Vec<&Tensor> = pairs.iter().map(|(_, c)| ex.value(c)).collect();
            let fcsts: Vec<&Tensor> = pairs.iter().map(|(f, _)| ex.value(f)).collect();
            for s in 0..n_series {
                let picked = top_by_confidence(&confs, s, k);
                for step in 0..h_len {
                    let mut vals: Vec<f64> =
                        picked.iter().map(|&mem| fcsts[mem].at(step, s)).collect();
                    acc[o_idx][s][step] += w * median(&mut vals);
                }
            }
        }
    }

    // Denormalize by each series' window level at its origin and clamp the
    // result to the non-negative range of the data.
    for (o_idx, day) in origins.enumerate() {
        let sb = &steps[day - first_step];
        for s in 0..n_series {
            let zbar = sb.primary_zbar[s];
            for v in &mut acc[o_idx][s] {
                *v = (*v * zbar).max(0.0);
            }
        }
    }
    Ok(acc)
}

/// One-shot forecast for a single series from raw inputs: normalizes the
/// window by the given level, runs one cold step of every team the level's
/// blend touches, and returns the denormalized, clamped horizon.
///
/// `flat_context` is the flattened context-track output the adapters read;
/// it is ignored when the model was built without the context track.
pub fn infer_quantile(
    model: &Model,
    series: usize,
    window: &[f64],
    zbar: f64,
    date: NaiveDate,
    q: f64,
    flat_context: &[f64],
) -> Result<Vec<f64>> {
    let cfg = model.config();
    if series >= model.regions().len() {
        return Err(Error::Domain(format!(
            "series index {series} out of range for {} regions",
            model.regions().len()
        )));
    }
    if window.len() != cfg.window_len() {
        return Err(Error::Domain(format!(
            "window must hold {} values, got {}",
            cfg.window_len(),
            window.len()
        )));
    }
    if !zbar.is_finite() || zbar <= 0.0 {
        return Err(Error::Domain(format!(
            "window level must be positive and finite, got {zbar}"
        )));
    }
    let weights = model.subranges().weights(q)?;
    let flat_len = cfg.per_series_context * model.regions().len();
    if !cfg.no_context && flat_context.len() != flat_len {
        return Err(Error::Domain(format!(
            "flat context must hold {flat_len} values, got {}",
            flat_context.len()
        )));
    }

    let mut ex = EvalExec::new();
    let mut run = ModelRun::new(model, &mut ex);

    let r_prime = if cfg.no_context {
        ex.constant(Tensor::zeros(&[cfg.embedded_context, 1]))
    } else {
        let flat = ex.constant(Tensor::matrix(flat_len, 1, flat_context.to_vec())?);
        run.adapt(&mut ex, &flat, &[series])?
    };

    let u = cfg.resolution;
    let xn: Vec<f64> = window.iter().map(|v| v / zbar).collect();
    let stream_data: Vec<Tensor> = if cfg.no_patches {
        vec![Tensor::matrix(cfg.window_len(), 1, xn)?]
    } else {
        (0..cfg.input_days)
            .map(|j| Tensor::matrix(u, 1, xn[j * u..(j + 1) * u].to_vec()))
            .collect::<Result<_>>()?
    };
    let streams = stream_data.into_iter().map(|t| ex.constant(t)).collect();
    let d_tiled = ex.slice(&run.vars.date_map, 1, week_index(date), 1)?;
    let zrow = ex.constant(Tensor::matrix(1, 1, vec![zbar])?);
    let inputs = StepInputs {
        streams,
        d_tiled,
        zbar: zrow,
    };

    let q_row = ex.constant(Tensor::matrix(1, 1, vec![q])?);
    let k = cfg.selected();
    let mut acc = vec![0.0; cfg.horizon_len()];
    for &(sub, w) in &weights {
        let pairs = run.team_step(&mut ex, sub, &inputs, &q_row, &r_prime, cfg.input_days)?;
        let confs: Vec<&Tensor> = pairs.iter().map(|(_, c)| ex.value(c)).collect();
        let fcsts: Vec<&Tensor> = pairs.iter().map(|(f, _)| ex.value(f)).collect();
        let picked = top_by_confidence(&confs, 0, k);
        for (step, slot) in acc.iter_mut().enumerate() {
            let mut vals: Vec<f64> = picked.iter().map(|&mem| fcsts[mem].at(step, 0)).collect();
            *slot += w * median(&mut vals);
        }
    }
    Ok(acc.into_iter().map(|v| (v * zbar).max(0.0)).collect())
}

/// Writes the bundle as CSV with columns `region_id,origin,step,quantile,value`,
/// sorted by (region, origin, step, quantile).  Steps are 1-based hours past
/// the origin midnight.
pub fn write_forecast_csv(bundle: &ForecastBundle, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(
        64 + bundle.regions.len() * bundle.origins.len() * bundle.horizon_len * 24,
    );
    out.push_str("region_id,origin,step,quantile,value\n");
    for (s, region) in bundle.regions.iter().enumerate() {
        for of in &bundle.origins {
            for step in 0..bundle.horizon_len {
                for (li, &q) in bundle.levels.iter().enumerate() {
                    let v = of.values[li][s][step];
                    out.push_str(&format!("{region},{},{},{q},{v}\n", of.date, step + 1));
                }
            }
        }
    }
    crate::atomic_write(path, out.as_bytes())
}

/// Member indices ranked by confidence (highest first, ties by member index),
/// truncated to the top `k`.
fn top_by_confidence(confs: &[&Tensor], col: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..confs.len()).collect();
    idx.sort_by(|&a, &b| {
        confs[b]
            .at(0, col)
            .total_cmp(&confs[a].at(0, col))
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Median with the even-count convention of averaging the two middle values.
pub fn median(vals: &mut [f64]) -> f64 {
    debug_assert!(!vals.is_empty());
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}
