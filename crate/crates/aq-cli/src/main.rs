//! `aq` — train, forecast, and evaluate any-quantile forecasting models on
//! panels of hourly series.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "aq", version, about = "Any-quantile forecasting for hourly panel data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hourly panel and write it as CSV.
    Synth {
        /// Number of regions to simulate.
        #[arg(long, default_value_t = 8)]
        regions: usize,
        /// Length of the panel in years, starting 2001-01-01.
        #[arg(long, default_value_t = 4)]
        years: usize,
        /// RNG seed for the simulation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Panel CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an ensemble on the panel's training span and save it with a
    /// manifest.
    Train {
        /// Run configuration JSON; defaults apply to every omitted field.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Panel CSV of actuals (overrides the config's "data").
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model directory to create (overrides the config's "out").
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast chosen quantile levels from a trained model directory.
    Forecast {
        /// Model directory produced by `aq train`.
        #[arg(long)]
        model: PathBuf,
        /// Panel CSV providing the conditioning history.
        #[arg(long)]
        data: PathBuf,
        /// Origin day `YYYY-MM-DD`, or an inclusive range
        /// `YYYY-MM-DD..YYYY-MM-DD`.
        #[arg(long)]
        origin: String,
        /// Comma-separated levels in (0,1), or `grid` for the 101-level
        /// evaluation grid.
        #[arg(long, default_value = "0.05,0.5,0.95")]
        quantiles: String,
        /// Sort each step's values across levels so quantiles cannot cross.
        #[arg(long, default_value_t = false)]
        monotone: bool,
        /// Forecast CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a forecast CSV against actuals and write a JSON report.
    Evaluate {
        /// Forecast CSV produced by `aq forecast`.
        #[arg(long)]
        forecasts: PathBuf,
        /// Panel CSV of actuals.
        #[arg(long)]
        actuals: PathBuf,
        /// Also score the seasonal empirical-quantile baseline and compare
        /// loss series against it.
        #[arg(long, default_value_t = false)]
        baseline: bool,
        /// Report JSON to write.
        #[arg(long)]
        report: PathBuf,
    },
}

/// Exit codes: 2 for configuration or argument problems, 3 for data or I/O
/// problems, 4 for numeric failures.
fn exit_code(e: &aqrnn::Error) -> u8 {
    use aqrnn::Error::*;
    match e {
        Config(_) | Domain(_) => 2,
        Data(_) | Io(_) | Format(_) => 3,
        Numeric(_) | Shape { .. } => 4,
    }
}

fn run(cli: Cli) -> aqrnn::Result<()> {
    match cli.command {
        Command::Synth {
            regions,
            years,
            seed,
            out,
        } => commands::cmd_synth(regions, years, seed, &out),
        Command::Train { config, data, out } => {
            commands::cmd_train(config.as_deref(), data.as_deref(), out.as_deref())
        }
        Command::Forecast {
            model,
            data,
            origin,
            quantiles,
            monotone,
            out,
        } => commands::cmd_forecast(&model, &data, &origin, &quantiles, monotone, &out),
        Command::Evaluate {
            forecasts,
            actuals,
            baseline,
            report,
        } => commands::cmd_evaluate(&forecasts, &actuals, baseline, &report),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print and succeed; anything else is
            // a usage error.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
