//! Command-line front end: single runs, MPR sweeps and scenario validation.
//!
//! Exit codes: 0 on success, 1 on a scenario validation error, 2 on a
//! runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use corsim_core::engine::run;
use corsim_core::output::{write_outputs, write_sweep};
use corsim_core::scenario::{load_scenario, SweepSpec};
use corsim_core::sweep::run_sweep;
use corsim_core::{ConfigError, SimError};

#[derive(Parser)]
#[command(name = "corsim", version, about = "Deterministic highway-corridor platooning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one scenario and write trajectories, events and a summary.
    Run(RunArgs),
    /// Run a seeded market-penetration-rate sweep and write sweep.csv.
    Sweep(SweepArgs),
    /// Parse and validate a scenario, echoing the resolved configuration.
    Validate { scenario: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Override the scenario's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    scenario: PathBuf,
    /// Comma-separated MPR points in percent (must include 0).
    #[arg(long, value_delimiter = ',')]
    mpr: Option<Vec<f64>>,
    /// Runs per MPR point, seeded from the scenario seed upward.
    #[arg(long, default_value_t = 6)]
    seeds: u32,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_validation_error(&err) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn is_validation_error(err: &anyhow::Error) -> bool {
    if err.downcast_ref::<ConfigError>().is_some() {
        return true;
    }
    matches!(err.downcast_ref::<SimError>(), Some(SimError::Config(_)))
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let (mut config, warnings) = load_scenario(&args.scenario)?;
            if let Some(seed) = args.seed {
                config.sim.seed = seed;
            }
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let result = run(&config)?;
            let files = write_outputs(&result, &args.out)?;
            match &result.summary {
                Some(summary) => println!(
                    "completed {} trips | mean travel time {:.2} s | mean delay {:.2} s | mean fuel {:.4} L",
                    summary.fleet.trips,
                    summary.fleet.travel_time_s,
                    summary.fleet.delay_s,
                    summary.fleet.fuel_l
                ),
                None => println!("no completed trips"),
            }
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Sweep(args) => {
            let (config, warnings) = load_scenario(&args.scenario)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let mut spec = SweepSpec::new(config);
            if let Some(mpr) = args.mpr {
                spec.mpr_percents = mpr;
            }
            spec.seeds = args.seeds;
            let table = run_sweep(&spec)?;
            std::fs::create_dir_all(&args.out)
                .map_err(|e| SimError::io(args.out.clone(), e))?;
            let path = args.out.join("sweep.csv");
            write_sweep(&path, &table)?;
            for row in &table.rows {
                println!(
                    "MPR {:>5.1}% | travel time {:.1} s | delay {:.1} s | fuel {:.4} L | fuel change {:+.2}%",
                    row.mpr_pct,
                    row.means.travel_time_s,
                    row.means.delay_s,
                    row.means.fuel_l,
                    row.reduction.fuel_pct
                );
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Validate { scenario } => {
            let (config, warnings) = load_scenario(&scenario)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", config.to_toml_string());
            Ok(())
        }
    }
}
