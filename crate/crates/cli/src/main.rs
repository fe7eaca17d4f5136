use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unichaos_cli::{execute, resolve_threads, Command, Invocation, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "unichaos", version, about = "Coupled mean-field particle experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for run output; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides CHAOS_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Time series of the coupled distance and state moments.
    Simulate,
    /// Assumption certificate at each refinement level.
    Verify,
    /// Coupled distance over a grid of N and t, with rate and plateau tests.
    Sweep,
    /// Moment-sum and ODE-comparison self-checks.
    Lemmas {
        /// Normalise with a wrong exponent; the suite must then fail.
        #[arg(long)]
        self_test_fault: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = match resolve_threads(cli.threads) {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start thread pool: {e}");
        return ExitCode::from(1);
    }
    let (command, fault_offset) = match cli.command {
        Cmd::Simulate => (Command::Simulate, 0),
        Cmd::Verify => (Command::Verify, 0),
        Cmd::Sweep => (Command::Sweep, 0),
        Cmd::Lemmas { self_test_fault } => (Command::Lemmas, u32::from(self_test_fault)),
    };
    let outcome = execute(&Invocation {
        command,
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        fault_offset,
    });
    if let Some(dir) = &outcome.run_dir {
        println!("{}", dir.display());
    }
    if let Some(msg) = &outcome.message {
        eprintln!("error: {msg}");
    }
    ExitCode::from(outcome.exit_code as u8)
}
