use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tetrastab::experiment::{exit_code, run, Command, RunOptions};

/// Deterministic experiment runner: JSON config in, CSV out.
#[derive(Parser)]
#[command(name = "tetrastab", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel parts.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Check partition admissibility and report regularity constants.
    Validate,
    /// DtN norm against partition distance along a deformation path.
    Sweep,
    /// Shape derivative of the DtN pairing on boundary probe pairs.
    Derivative,
    /// Match the tetrahedra of two fields.
    Match,
    /// Fourier-side estimates from CGO probes.
    Fourier,
    /// Recover vertex positions from DtN data.
    Reconstruct,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Validate => Command::Validate,
            Cmd::Sweep => Command::Sweep,
            Cmd::Derivative => Command::Derivative,
            Cmd::Match => Command::Match,
            Cmd::Fourier => Command::Fourier,
            Cmd::Reconstruct => Command::Reconstruct,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = cli.config else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(2);
    };
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: cannot start {n} threads");
            return ExitCode::from(2);
        }
    }
    // faer's dense kernels split work by thread count; keep them sequential so
    // the output does not depend on --threads
    faer::set_global_parallelism(faer::Par::Seq);
    let opts = RunOptions { config, out: cli.out, seed: cli.seed };
    match run(cli.command.into(), &opts) {
        Ok(report) => {
            println!("{}", report.summary.trim_end());
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            ExitCode::from(if report.admissible { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
