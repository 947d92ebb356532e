//! Experiment runner for the distributed solar forecasting library.
//!
//! Exit codes: 0 success, 1 runtime error, 2 config/data validation
//! error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use solarcast::config::ExperimentConfig;
use solarcast::dataio::SyntheticConfig;
use solarcast::experiment::{self, ExperimentError};
use solarcast::metrics::EvalReport;

#[derive(Parser)]
#[command(
    name = "solarcast",
    version,
    about = "Distributed MLR solar-current forecasting: run experiments, compare models, generate data"
)]
struct Cli {
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config file.
    Run {
        /// Experiment config path.
        config: PathBuf,
    },
    /// Compare evaluation reports produced by `run`.
    Compare {
        /// Two or more `report_<model>.json` files over the same span.
        reports: Vec<PathBuf>,
    },
    /// Generate a synthetic dataset as CSV.
    GenData {
        /// Synthetic config path (TOML; `days`, `nodes`, `seed`, ...).
        config: PathBuf,
        /// Output CSV path.
        #[arg(long, default_value = "synthetic.csv")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::Run { config } => {
            let text = fs::read_to_string(&config).map_err(|e| {
                ExperimentError::Config(format!("cannot read {}: {e}", config.display()))
            })?;
            let cfg = ExperimentConfig::from_toml(&text)?;
            let out_dir = cli
                .out_dir
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let artifacts = experiment::run_experiment(&cfg, &out_dir, cli.seed)?;
            println!(
                "wrote {} artifacts to {}",
                artifacts.files.len(),
                artifacts.out_dir.display()
            );
            print!("{}", solarcast::metrics::render_table(&artifacts.reports));
            Ok(())
        }
        Command::Compare { reports } => {
            if reports.len() < 2 {
                return Err(ExperimentError::Config(
                    "compare needs at least two report files".into(),
                ));
            }
            let mut loaded: Vec<EvalReport> = Vec::with_capacity(reports.len());
            for path in &reports {
                let text = fs::read_to_string(path).map_err(|e| {
                    ExperimentError::Data(format!("cannot read {}: {e}", path.display()))
                })?;
                loaded.push(serde_json::from_str(&text).map_err(|e| {
                    ExperimentError::Data(format!("cannot parse {}: {e}", path.display()))
                })?);
            }
            print!("{}", experiment::compare_reports(&loaded)?);
            Ok(())
        }
        Command::GenData { config, out } => {
            let text = fs::read_to_string(&config).map_err(|e| {
                ExperimentError::Config(format!("cannot read {}: {e}", config.display()))
            })?;
            let mut cfg: SyntheticConfig = toml::from_str(&text)
                .map_err(|e| ExperimentError::Config(format!("cannot parse config: {e}")))?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let out = match cli.out_dir {
                Some(dir) => {
                    fs::create_dir_all(&dir)
                        .map_err(|e| ExperimentError::Io(e.to_string()))?;
                    dir.join(out)
                }
                None => out,
            };
            experiment::generate_to_csv(&cfg, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
