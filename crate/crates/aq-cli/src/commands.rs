//! Implementations behind the CLI subcommands: synthetic data generation,
//! ensemble training with a manifest, any-quantile forecasting with median
//! aggregation, and evaluation against actuals (optionally versus the
//! seasonal baseline).

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use aqrnn::baseline::{baseline_bundle, DEFAULT_BASELINE_WINDOW};
use aqrnn::dataset::{
    chrono_split, load_panel, origins_in, save_panel, synth_panel, Panel, Split, HOURS_PER_DAY,
};
use aqrnn::metrics::{
    crps, diebold_mariano, per_step_crps, report, EvalInput, DEFAULT_DM_LAG,
};
use aqrnn::network::{
    forecast_range, median, write_forecast_csv, ForecastBundle, Model, OriginForecast,
};
use aqrnn::quantile::test_grid;
use aqrnn::training::fit;
use aqrnn::{atomic_write, parallel_map_indexed, Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Worker-thread cap: `AQ_THREADS` when set to a positive integer, else the
/// machine's available parallelism.
pub fn thread_cap() -> usize {
    if let Ok(raw) = std::env::var("AQ_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n >= 1 => return n,
            _ => eprintln!("warning: ignoring invalid AQ_THREADS value {raw:?}"),
        }
    }
    std::thread::available_parallelism()
        .map(NonZeroUsize::get)
        .unwrap_or(1)
}

pub fn cmd_synth(regions: usize, years: usize, seed: u64, out: &Path) -> Result<()> {
    let panel = synth_panel(regions, years, seed)?;
    save_panel(&panel, out)?;
    println!(
        "wrote {} region(s) x {} days to {}",
        panel.regions().len(),
        panel.days(),
        out.display()
    );
    Ok(())
}

/// What a model directory records about its training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    /// SHA-256 of the canonical configuration JSON.
    pub config_hash: String,
    pub config: RunConfig,
    /// Seed each member trained with.
    pub seeds: Vec<u64>,
    /// Each member's CRPS over the validation origins on the full level
    /// grid; null when the validation range is empty.
    pub validation_crps: Vec<Option<f64>>,
    pub regions: Vec<String>,
}

pub fn cmd_train(config: Option<&Path>, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let data_path = data
        .map(PathBuf::from)
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| {
            Error::Config("no panel given: pass --data or set \"data\" in the config".into())
        })?;
    let out_dir = out
        .map(PathBuf::from)
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| {
            Error::Config(
                "no output directory: pass --out or set \"out\" in the config".into(),
            )
        })?;
    let panel = load_panel(&data_path)?;
    let split = chrono_split(&panel, cfg.train_end, cfg.validation_end, cfg.test_end)?;
    if split.train.is_empty() {
        return Err(Error::Config(format!(
            "no training days before {} in a panel starting {}",
            cfg.train_end,
            panel.date_of_day(0)
        )));
    }
    let val_origins = origins_in(&split.valid, cfg.network.input_days, cfg.network.horizon_days);
    if val_origins.is_empty() {
        eprintln!(
            "warning: the validation range holds no full forecast window; \
             the manifest will carry no validation CRPS"
        );
    }
    std::fs::create_dir_all(&out_dir)?;

    let members: Vec<usize> = (0..cfg.ensemble).collect();
    let results = parallel_map_indexed(members, thread_cap(), |_, k| {
        train_member(&panel, &cfg, &split, k)
    });
    let mut seeds = Vec::with_capacity(cfg.ensemble);
    let mut validation_crps = Vec::with_capacity(cfg.ensemble);
    for (k, result) in results.into_iter().enumerate() {
        let trained = result?;
        for line in &trained.log {
            println!("member {k}: {line}");
        }
        match trained.validation_crps {
            Some(c) => println!("member {k}: validation CRPS {c}"),
            None => println!("member {k}: validation CRPS n/a"),
        }
        trained.model.save(&out_dir.join(format!("member_{k}.aqm")))?;
        seeds.push(trained.seed);
        validation_crps.push(trained.validation_crps);
    }
    let manifest = Manifest {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        seeds,
        validation_crps,
        regions: panel.regions().to_vec(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    atomic_write(&out_dir.join("manifest.json"), text.as_bytes())?;
    println!(
        "wrote {} member(s) and manifest to {}",
        cfg.ensemble,
        out_dir.display()
    );
    Ok(())
}

struct TrainedMember {
    model: Model,
    seed: u64,
    log: Vec<String>,
    validation_crps: Option<f64>,
}

fn train_member(panel: &Panel, cfg: &RunConfig, split: &Split, k: usize) -> Result<TrainedMember> {
    let mut tcfg = cfg.training.clone();
    tcfg.seed = tcfg.seed.wrapping_add(k as u64);
    let mut log = Vec::new();
    let model = fit(panel, split.train.clone(), cfg.network.clone(), &tcfg, |l| {
        log.push(l.to_string())
    })?;
    let val_origins = origins_in(&split.valid, cfg.network.input_days, cfg.network.horizon_days);
    let validation_crps = if val_origins.is_empty() {
        None
    } else {
        // Members already fan out across threads, so keep inference serial.
        let bundle = forecast_range(&model, panel, val_origins, &test_grid(), false, 1)?;
        let named = bundle_inputs(&bundle, panel)?;
        let parts: Vec<EvalInput> = named.into_iter().map(|(_, inp)| inp).collect();
        let pooled = EvalInput::concat(&parts)?;
        if pooled.masked_count() == 0 {
            eprintln!("warning: no positive validation targets; skipping validation CRPS");
            None
        } else {
            Some(crps(&pooled)?)
        }
    };
    Ok(TrainedMember {
        model,
        seed: tcfg.seed,
        log,
        validation_crps,
    })
}

/// Pairs a forecast bundle with its actuals: one evaluation input per
/// region, observations ordered by (origin, step), masked on positive
/// targets.
pub fn bundle_inputs(bundle: &ForecastBundle, panel: &Panel) -> Result<Vec<(String, EvalInput)>> {
    let mut named = Vec::with_capacity(bundle.regions.len());
    for (r, region) in bundle.regions.iter().enumerate() {
        let idx = panel.region_index(region).ok_or_else(|| {
            Error::Data(format!("region {region} is missing from the actuals panel"))
        })?;
        let series = panel.series(idx);
        let mut actuals = Vec::new();
        let mut rows = vec![Vec::new(); bundle.levels.len()];
        for of in &bundle.origins {
            for step in 0..bundle.horizon_len {
                let hour = of.day * HOURS_PER_DAY + step;
                if hour >= series.len() {
                    return Err(Error::Data(format!(
                        "forecast for {region} at origin {} step {} has no actual observation",
                        of.date,
                        step + 1
                    )));
                }
                actuals.push(series[hour]);
                for (l, row) in rows.iter_mut().enumerate() {
                    row.push(of.values[l][r][step]);
                }
            }
        }
        named.push((
            region.clone(),
            EvalInput::new_masked_on_positive(bundle.levels.clone(), actuals, rows)?,
        ));
    }
    Ok(named)
}

/// Parses `--quantiles`: `grid` for the 101-level evaluation grid, else a
/// comma-separated list of levels, each validated against (0,1).
pub fn parse_quantiles(spec: &str) -> Result<Vec<f64>> {
    if spec.trim() == "grid" {
        return Ok(test_grid());
    }
    let mut levels = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let q: f64 = part
            .parse()
            .map_err(|_| Error::Domain(format!("cannot parse quantile level {part:?}")))?;
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!(
                "quantile level {q} is outside (0, 1)"
            )));
        }
        levels.push(q);
    }
    if levels.is_empty() {
        return Err(Error::Domain("no quantile levels requested".into()));
    }
    Ok(levels)
}

/// Parses `--origin`: a single `YYYY-MM-DD`, or an inclusive range
/// `YYYY-MM-DD..YYYY-MM-DD`, mapped to day indices of the panel.
pub fn parse_origins(spec: &str, panel: &Panel) -> Result<std::ops::Range<usize>> {
    let to_day = |text: &str| -> Result<usize> {
        let date: NaiveDate = text.trim().parse().map_err(|_| {
            Error::Domain(format!("cannot parse origin date {:?}", text.trim()))
        })?;
        panel.day_of_date(date).ok_or_else(|| {
            Error::Data(format!(
                "origin {date} is outside the panel ({}..{})",
                panel.date_of_day(0),
                panel.date_of_day(panel.days() - 1)
            ))
        })
    };
    if let Some((a, b)) = spec.split_once("..") {
        let (start, end) = (to_day(a)?, to_day(b)?);
        if end < start {
            return Err(Error::Domain(format!(
                "origin range {spec:?} runs backwards"
            )));
        }
        Ok(start..end + 1)
    } else {
        let day = to_day(spec)?;
        Ok(day..day + 1)
    }
}

/// Loads `member_0.aqm`, `member_1.aqm`, … from a model directory.
pub fn load_members(dir: &Path) -> Result<Vec<Model>> {
    let mut members = Vec::new();
    loop {
        let path = dir.join(format!("member_{}.aqm", members.len()));
        if !path.exists() {
            break;
        }
        members.push(Model::load(&path)?);
    }
    if members.is_empty() {
        return Err(Error::Data(format!(
            "no member_0.aqm in {}",
            dir.display()
        )));
    }
    for m in &members[1..] {
        if m.regions() != members[0].regions() {
            return Err(Error::Data(
                "ensemble members disagree on their region lists".into(),
            ));
        }
    }
    Ok(members)
}

/// Combines member bundles into one by a per-coordinate median, so with an
/// odd member count every output value is one member's value.
pub fn combine_bundles(mut bundles: Vec<ForecastBundle>) -> Result<ForecastBundle> {
    let Some(first) = bundles.first() else {
        return Err(Error::Data("no forecasts to combine".into()));
    };
    if bundles.len() == 1 {
        return Ok(bundles.remove(0));
    }
    let mut combined = first.clone();
    for (o, origin) in combined.origins.iter_mut().enumerate() {
        for (l, per_series) in origin.values.iter_mut().enumerate() {
            for (s, horizon) in per_series.iter_mut().enumerate() {
                for (step, slot) in horizon.iter_mut().enumerate() {
                    let mut votes: Vec<f64> = bundles
                        .iter()
                        .map(|b| b.origins[o].values[l][s][step])
                        .collect();
                    *slot = median(&mut votes);
                }
            }
        }
    }
    Ok(combined)
}

pub fn cmd_forecast(
    model_dir: &Path,
    data: &Path,
    origin: &str,
    quantiles: &str,
    monotone: bool,
    out: &Path,
) -> Result<()> {
    let panel = load_panel(data)?;
    let levels = parse_quantiles(quantiles)?;
    let origins = parse_origins(origin, &panel)?;
    let members = load_members(model_dir)?;
    let threads = thread_cap();
    let mut bundles = Vec::with_capacity(members.len());
    for model in &members {
        bundles.push(forecast_range(
            model,
            &panel,
            origins.clone(),
            &levels,
            monotone,
            threads,
        )?);
    }
    let n_members = bundles.len();
    let combined = combine_bundles(bundles)?;
    write_forecast_csv(&combined, out)?;
    println!(
        "wrote {} origin(s) x {} level(s) x {} region(s) from {} member(s) to {}",
        combined.origins.len(),
        combined.levels.len(),
        combined.regions.len(),
        n_members,
        out.display()
    );
    Ok(())
}

/// Reads a forecast CSV back into a bundle, validating the header, every
/// cell's types and ranges, and grid completeness: each (region, origin,
/// step) must carry every quantile level and every step in 1..=horizon.
pub fn read_forecast_csv(path: &Path, panel: &Panel) -> Result<ForecastBundle> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read {} header: {e}", path.display())))?;
    let expected = ["region_id", "origin", "step", "quantile", "value"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "unexpected forecast CSV header {:?}; expected {expected:?}",
            headers.iter().collect::<Vec<_>>()
        )));
    }
    // cells[(day, region, step, level-bits)] -> value
    let mut cells: BTreeMap<(usize, usize, usize, u64), f64> = BTreeMap::new();
    let mut level_bits: Vec<u64> = Vec::new();
    let mut region_ids: Vec<usize> = Vec::new();
    let mut days: Vec<usize> = Vec::new();
    let mut horizon_len = 0usize;
    for (row_no, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let context = |what: &str| {
            Error::Data(format!(
                "{} row {}: bad {what}: {:?}",
                path.display(),
                row_no + 2,
                row
            ))
        };
        if row.len() != 5 {
            return Err(context("column count"));
        }
        let region = panel
            .region_index(&row[0])
            .ok_or_else(|| context("region (not in the actuals panel)"))?;
        let date: NaiveDate = row[1].parse().map_err(|_| context("origin date"))?;
        let day = panel
            .day_of_date(date)
            .ok_or_else(|| context("origin date (outside the actuals panel)"))?;
        let step: usize = row[2].parse().map_err(|_| context("step"))?;
        if step == 0 {
            return Err(context("step (steps are 1-based)"));
        }
        let q: f64 = row[3].parse().map_err(|_| context("quantile"))?;
        if !(q > 0.0 && q < 1.0) {
            return Err(context("quantile (must lie in (0,1))"));
        }
        let value: f64 = row[4].parse().map_err(|_| context("value"))?;
        if !value.is_finite() {
            return Err(context("value (must be finite)"));
        }
        let key = (day, region, step - 1, q.to_bits());
        if cells.insert(key, value).is_some() {
            return Err(Error::Data(format!(
                "{} row {}: duplicate cell for region {}, origin {date}, step {step}, \
                 quantile {q}",
                path.display(),
                row_no + 2,
                &row[0]
            )));
        }
        level_bits.push(q.to_bits());
        region_ids.push(region);
        days.push(day);
        horizon_len = horizon_len.max(step);
    }
    if cells.is_empty() {
        return Err(Error::Data(format!("{} holds no forecasts", path.display())));
    }
    level_bits.sort_unstable();
    level_bits.dedup();
    let mut levels: Vec<f64> = level_bits.iter().map(|&b| f64::from_bits(b)).collect();
    levels.sort_by(f64::total_cmp);
    region_ids.sort_unstable();
    region_ids.dedup();
    days.sort_unstable();
    days.dedup();

    // Completeness: every (origin, region, step, level) cell must exist.
    let mut missing = Vec::new();
    for &day in &days {
        for &region in &region_ids {
            for step in 0..horizon_len {
                for &q in &levels {
                    if !cells.contains_key(&(day, region, step, q.to_bits())) {
                        missing.push(format!(
                            "({}, {}, step {}, q {q})",
                            panel.regions()[region],
                            panel.date_of_day(day),
                            step + 1
                        ));
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        let shown: Vec<_> = missing.iter().take(5).cloned().collect();
        return Err(Error::Data(format!(
            "{}: {} missing forecast cell(s), first {}: {}",
            path.display(),
            missing.len(),
            shown.len(),
            shown.join(", ")
        )));
    }

    let regions: Vec<String> = region_ids
        .iter()
        .map(|&r| panel.regions()[r].clone())
        .collect();
    let origins = days
        .iter()
        .map(|&day| OriginForecast {
            day,
            date: panel.date_of_day(day),
            values: levels
                .iter()
                .map(|q| {
                    region_ids
                        .iter()
                        .map(|&r| {
                            (0..horizon_len)
                                .map(|step| cells[&(day, r, step, q.to_bits())])
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        })
        .collect();
    Ok(ForecastBundle {
        regions,
        levels,
        horizon_len,
        origins,
    })
}

pub fn cmd_evaluate(
    forecasts: &Path,
    actuals: &Path,
    with_baseline: bool,
    report_path: &Path,
) -> Result<()> {
    let panel = load_panel(actuals)?;
    let bundle = read_forecast_csv(forecasts, &panel)?;
    let named = bundle_inputs(&bundle, &panel)?;
    let mut rep = report(&named)?;
    if with_baseline {
        let days: Vec<usize> = bundle.origins.iter().map(|o| o.day).collect();
        let base = baseline_bundle(
            &panel,
            &days,
            &bundle.levels,
            bundle.horizon_len,
            DEFAULT_BASELINE_WINDOW,
        )?;
        // The baseline bundle covers every panel region; pair it with the
        // forecast's regions by name in the forecast's order.
        let mut base_by_region: BTreeMap<String, EvalInput> =
            bundle_inputs(&base, &panel)?.into_iter().collect();
        let mut aligned = Vec::with_capacity(named.len());
        for (region, model_inp) in &named {
            let base_inp = base_by_region
                .remove(region)
                .expect("the baseline covers every panel region");
            aligned.push((model_inp, base_inp));
        }
        let mut model_losses = Vec::new();
        let mut base_losses = Vec::new();
        for (model_inp, base_inp) in &aligned {
            if model_inp.masked_count() == 0 {
                continue;
            }
            model_losses.extend(per_step_crps(model_inp)?);
            base_losses.extend(per_step_crps(base_inp)?);
        }
        let model_vs_base = diebold_mariano(&model_losses, &base_losses, DEFAULT_DM_LAG)?;
        let base_vs_model = diebold_mariano(&base_losses, &model_losses, DEFAULT_DM_LAG)?;
        if model_vs_base.small_sample {
            eprintln!(
                "warning: loss series shorter than twice the HAC lag; \
                 the comparison fell back to a plain variance"
            );
        }
        rep.dm_labels = vec!["model".into(), "baseline".into()];
        rep.dm_matrix = vec![
            vec![0.5, model_vs_base.p_value],
            vec![base_vs_model.p_value, 0.5],
        ];
        let base_parts: Vec<EvalInput> = aligned.into_iter().map(|(_, inp)| inp).collect();
        let base_pooled = EvalInput::concat(&base_parts)?;
        println!("baseline CRPS {}", crps(&base_pooled)?);
    }
    let text = serde_json::to_string_pretty(&rep).expect("report serializes");
    atomic_write(report_path, text.as_bytes())?;
    println!(
        "CRPS {}  MARFE {}  MWS {}  coverage {:.2}/{:.2}/{:.2}",
        rep.crps, rep.marfe, rep.mws, rep.coverage.below, rep.coverage.within, rep.coverage.above
    );
    Ok(())
}
