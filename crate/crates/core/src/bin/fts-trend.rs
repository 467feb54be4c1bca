use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fts_trend::cli_io::{
    command_benchmark, command_detrend, command_forecast, command_simulate, load_dataset, synthetic_dataset,
    CommandOutput, RunConfig, OUTPUT_DIR_ENV,
};
use fts_trend::fts_sim::TrendSurfaceId;
use fts_trend::Result;

/// Trend estimation, simulation and forecasting for functional time series.
#[derive(Parser)]
#[command(name = "fts-trend", version)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override the config file.
#[derive(Args)]
struct CommonArgs {
    /// key = value file with RunConfig fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    k1: Option<usize>,
    #[arg(long, global = true)]
    k2: Option<usize>,
    /// Fixed λ for the s axis; REML picks it otherwise
    #[arg(long, global = true)]
    lambda_s: Option<f64>,
    /// Fixed λ for the t axis; REML picks it otherwise
    #[arg(long, global = true)]
    lambda_t: Option<f64>,
    /// Number of functional principal components
    #[arg(long, global = true)]
    r: Option<usize>,
    /// Largest AR order tried for each score series
    #[arg(long, global = true)]
    p_max: Option<usize>,
    #[arg(long, global = true)]
    replications: Option<usize>,
    #[arg(long, global = true)]
    base_seed: Option<u64>,
    /// literal or sample-size
    #[arg(long, global = true)]
    scaling: Option<String>,
    /// harmonic or uniform
    #[arg(long, global = true)]
    step: Option<String>,
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the trend surface and write trend, residuals and λs
    Detrend {
        input: PathBuf,
        /// Use the numeric time labels instead of n/N
        #[arg(long)]
        keep_time: bool,
    },
    /// Run the Monte Carlo comparison of trend estimators
    Benchmark {
        /// Comma-separated trend ids, e.g. T1,T3
        #[arg(long)]
        trends: Option<String>,
        /// Comma-separated estimators among TPS, Lin, Naiv, Ker
        #[arg(long)]
        estimators: Option<String>,
        /// Comma-separated sample sizes
        #[arg(long)]
        n_values: Option<String>,
    },
    /// Compare forecasts with and without the trend on held-out curves
    Forecast {
        /// Matrix CSV; omit to use a simulated scenario
        input: Option<PathBuf>,
        /// Number of trailing curves held out (defaults to the horizon)
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        holdout: Option<u64>,
        /// Trend added to a simulated FAR(1) series when no input is given
        #[arg(long, default_value = "T3")]
        scenario: TrendSurfaceId,
        /// Curves in the simulated series
        #[arg(long)]
        n: Option<usize>,
    },
    /// Write a simulated FAR(1) series, optionally with a trend
    Simulate {
        #[arg(long)]
        trend: Option<TrendSurfaceId>,
        #[arg(long)]
        n: Option<usize>,
    },
}

fn build_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    let flags = [
        ("k1", common.k1.map(|v| v.to_string())),
        ("k2", common.k2.map(|v| v.to_string())),
        ("lambda_s", common.lambda_s.map(|v| v.to_string())),
        ("lambda_t", common.lambda_t.map(|v| v.to_string())),
        ("r", common.r.map(|v| v.to_string())),
        ("p_max", common.p_max.map(|v| v.to_string())),
        ("replications", common.replications.map(|v| v.to_string())),
        ("base_seed", common.base_seed.map(|v| v.to_string())),
        ("scaling", common.scaling.clone()),
        ("step", common.step.clone()),
    ];
    for (key, value) in flags {
        if let Some(value) = value {
            cfg.set(key, &value)?;
        }
    }
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<CommandOutput> {
    let mut cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Detrend { input, keep_time } => command_detrend(&cfg, &load_dataset(&input, !keep_time)?),
        Command::Benchmark {
            trends,
            estimators,
            n_values,
        } => {
            for (key, value) in [("trends", trends), ("estimators", estimators), ("n_values", n_values)] {
                if let Some(value) = value {
                    cfg.set(key, &value)?;
                }
            }
            command_benchmark(&cfg)
        }
        Command::Forecast {
            input,
            holdout,
            scenario,
            n,
        } => {
            let holdout = holdout.map_or(cfg.horizon, |h| h as usize);
            if let Some(n) = n {
                cfg.n = n;
            }
            let data = match input {
                Some(path) => load_dataset(&path, true)?,
                None => synthetic_dataset(Some(scenario), cfg.n, cfg.base_seed)?,
            };
            command_forecast(&cfg, &data, holdout)
        }
        Command::Simulate { trend, n } => {
            if let Some(n) = n {
                cfg.n = n;
            }
            command_simulate(&cfg, trend)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            for file in &out.files {
                println!("{}", file.display());
            }
            if out.failures > 0 {
                eprintln!("{} cells failed; see errors.json", out.failures);
            }
            ExitCode::from(out.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
