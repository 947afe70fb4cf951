use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use dppo::cli::{run_from_paths, CommandKind};

/// Group-relative policy optimization with unbiased hierarchical pruning,
/// on enumerable synthetic tasks.
#[derive(Parser)]
#[command(name = "dppo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment and write metrics/curves/summary files.
    Train(RunArgs),
    /// Run the oracle suite (unbiasedness grid, finite differences,
    /// variance bounds) and write verify_report.json.
    Verify(RunArgs),
    /// Benchmark packing strategies over synthetic length profiles.
    #[command(name = "pack-bench")]
    PackBench(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (flat key=value with # comments).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (overrides the config).
    #[arg(long)]
    workers: Option<usize>,
    /// Root seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Train(args) => (CommandKind::Train, args),
        Command::Verify(args) => (CommandKind::Verify, args),
        Command::PackBench(args) => (CommandKind::PackBench, args),
    };
    std::process::exit(run_from_paths(
        kind,
        args.config,
        args.out,
        args.workers,
        args.seed,
    ));
}
