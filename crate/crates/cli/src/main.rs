use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use fedfund_cli::commands::{self, Experiment, VerifyOptions};
use fedfund_cli::config;

#[derive(Parser)]
#[command(name = "fedfund")]
#[command(about = "Crowdfunded federated-learning auction simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Scenario configuration file (TOML, schema_version = 1).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV and event-log files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single sealed-bid auction and settlement from a JSON bid file.
    Auction {
        /// JSON file with models, the claim matrix, and an optional policy.
        bid_file: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run an experiment (utility | social | accuracy) and emit CSV plus
    /// event logs.
    Simulate {
        /// Experiment name: utility, social, or accuracy.
        experiment: String,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the verification suite: truthfulness matrix, case coverage,
    /// budget balance, replay determinism. Nonzero exit on any violation.
    Verify {
        /// Randomized instances for the truthfulness matrix.
        #[arg(long, default_value_t = 1_000)]
        instances: u64,
        /// Deviation grid step (1 = exhaustive integer grid).
        #[arg(long, default_value_t = 1)]
        grid_step: i64,
        /// Simulation seeds for the budget-balance and replay sweep.
        #[arg(long, default_value_t = 20)]
        sweep_seeds: u64,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Verify and replay a recorded event log, printing the reconstructed
    /// state digest.
    Replay {
        /// Event-log file (one JSON event per line).
        logfile: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn scenario_for(
    common: &CommonOpts,
    base: fedfund_core::scenario::Scenario,
) -> Result<fedfund_core::scenario::Scenario> {
    config::resolve_scenario(base, common.config.as_deref(), common.seed)
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Auction { bid_file, common } => {
            let reply = commands::run_auction_file(&bid_file)?;
            let json = serde_json::to_string_pretty(&reply)?;
            println!("{json}");
            let _ = common;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { experiment, common } => {
            let experiment = Experiment::parse(&experiment)?;
            let scenario = scenario_for(&common, experiment.default_scenario())?;
            let written = commands::run_experiment(experiment, &scenario, &common.out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            instances,
            grid_step,
            sweep_seeds,
            common,
        } => {
            if instances == 0 {
                println!("warning: empty verification matrix requested");
            }
            let scenario = scenario_for(&common, fedfund_core::scenario::Scenario::default())?;
            let options = VerifyOptions {
                instances,
                grid_step,
                sweep_seeds,
                seed: scenario.seed.wrapping_add(424_242),
            };
            let failures = commands::run_verify(&options, &scenario, &common.out)?;
            if failures == 0 {
                println!("verification passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("verification FAILED: {failures} check(s) violated");
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Replay { logfile, common } => {
            let scenario = scenario_for(&common, fedfund_core::scenario::Scenario::default())?;
            let summary = commands::run_replay(&logfile, &scenario)?;
            println!("events: {}", summary.events);
            println!("final round: {}", summary.round);
            println!("state digest: {}", summary.digest);
            for (participant, balance) in &summary.final_balances {
                println!("balance {participant}: {balance}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
