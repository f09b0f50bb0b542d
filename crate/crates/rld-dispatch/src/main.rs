use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rld_dispatch::commands::{self, RunArgs};

#[derive(Parser)]
#[command(
    name = "rld-dispatch",
    version,
    about = "Risk-limiting dispatch studies on DC networks: nominal dispatch \
             tables, analytic reserves, and Monte Carlo cost sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Nominal day-ahead dispatch: generation, flows, prices, congestion
    Nda(RunArgs),
    /// Analytic risk-limiting dispatch and its price of uncertainty
    Rld(RunArgs),
    /// Monte Carlo policy comparison at fixed error scale(s)
    Evaluate(RunArgs),
    /// Integration-cost sweep with fitted and analytic uncertainty prices
    Price(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Nda(args) => commands::cmd_nda(args),
        Command::Rld(args) => commands::cmd_rld(args),
        Command::Evaluate(args) => commands::cmd_evaluate(args),
        Command::Price(args) => commands::cmd_price(args),
    };
    if let Err(e) = result {
        eprintln!("ERROR {}: {}", e.code(), e);
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
