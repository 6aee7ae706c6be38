use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nsmix::cli::{run, Invocation};
use nsmix::config::Command;

/// Stochastic Navier–Stokes Galerkin simulator and mixing laboratory.
#[derive(Parser)]
#[command(name = "nsmix", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one solo path and dump the trajectory.
    Simulate(Common),
    /// Run one coupled chain and write its macro-step table.
    Couple(Common),
    /// Full mixing experiment: decay series, return times, meet sweep.
    Mix(Common),
    /// Compare the BEL line integral with a direct difference.
    BelCheck(Common),
    /// Estimate invariant-measure moments.
    Invariant(Common),
    /// Small-noise probabilities on a grid of levels.
    SmallNoise(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides run.output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed; overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    threads: Option<usize>,
    /// Dotted-key override, e.g. coupling.rho=3 (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (command, common) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Couple(c) => (Command::Couple, c),
        Cmd::Mix(c) => (Command::Mix, c),
        Cmd::BelCheck(c) => (Command::BelCheck, c),
        Cmd::Invariant(c) => (Command::Invariant, c),
        Cmd::SmallNoise(c) => (Command::SmallNoise, c),
    };
    let inv = Invocation {
        config: common.config,
        out: common.out,
        seed: common.seed,
        threads: common.threads,
        overrides: common.overrides,
    };
    match run(command, &inv) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", outcome.output_dir.join(f).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("nsmix {}: {e}", command.as_str());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
