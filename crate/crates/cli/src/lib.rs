//! Front end for the coupled-particle experiments: config loading, run
//! directories, and the `simulate`, `verify`, `sweep` and `lemmas`
//! commands.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use serde::Serialize;
use unichaos_core::Error;

use crate::commands::{CommandError, Verdict};
use crate::config::ExperimentConfig;
use crate::output::RunDir;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_ASSUMPTION: i32 = 4;

pub const THREADS_ENV: &str = "CHAOS_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Verify,
    Sweep,
    Lemmas,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Verify => "verify",
            Command::Sweep => "sweep",
            Command::Lemmas => "lemmas",
        }
    }
}

/// Everything needed to run one command.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Only used by `lemmas`: shift of the normalising exponent.
    pub fault_offset: u32,
}

#[derive(Debug)]
pub struct Outcome {
    pub exit_code: i32,
    pub run_dir: Option<PathBuf>,
    pub message: Option<String>,
}

impl Outcome {
    fn early(exit_code: i32, message: String) -> Self {
        Self {
            exit_code,
            run_dir: None,
            message: Some(message),
        }
    }
}

/// Thread count from `flag`, else `CHAOS_THREADS`, else all cores.
pub fn resolve_threads(flag: Option<usize>) -> Result<usize, String> {
    if let Some(n) = flag {
        return if n == 0 { Err("--threads must be at least 1".into()) } else { Ok(n) };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got `{v}`")),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Serialize)]
struct LemmaConfig {
    seed: u64,
    fault_offset: u32,
}

fn exit_code_of(e: &CommandError) -> i32 {
    match e {
        CommandError::Core(Error::Config { .. }) => EXIT_CONFIG,
        CommandError::Core(e) if e.is_numeric() => EXIT_NUMERIC,
        CommandError::Core(Error::DegenerateFit { .. }) => EXIT_NUMERIC,
        CommandError::Core(_) => EXIT_CONFIG,
        CommandError::Io(_) => EXIT_IO,
    }
}

/// Load the config, create the run directory, run the command and write
/// the manifest. Runs inside the current rayon pool.
pub fn execute(inv: &Invocation) -> Outcome {
    let loaded = match &inv.config {
        Some(path) => match ExperimentConfig::from_path(path) {
            Ok(c) => Some(c),
            Err(e) => return Outcome::early(EXIT_CONFIG, e.to_string()),
        },
        None if inv.command == Command::Lemmas => None,
        None => return Outcome::early(EXIT_CONFIG, "configuration error in `--config`: required".into()),
    };
    let loaded = loaded.map(|mut c| {
        if let Some(seed) = inv.seed {
            c.seed = seed;
        }
        if let Some(out) = &inv.out {
            c.output_dir = out.clone();
        }
        c
    });
    if let Some(c) = &loaded {
        if let Err(e) = c.validate() {
            return Outcome::early(EXIT_CONFIG, e.to_string());
        }
    }
    let seed = loaded.as_ref().map_or(inv.seed.unwrap_or(0), |c| c.seed);
    let (config_json, root) = match &loaded {
        Some(c) => (c.to_json(), c.output_dir.clone()),
        None => (
            serde_json::to_string_pretty(&LemmaConfig {
                seed,
                fault_offset: inv.fault_offset,
            })
            .expect("serializes"),
            inv.out.clone().unwrap_or_else(|| PathBuf::from("runs")),
        ),
    };
    let mut run = match RunDir::create(&root, inv.command.name()) {
        Ok(r) => r,
        Err(e) => return Outcome::early(EXIT_IO, format!("cannot create run directory: {e}")),
    };
    let dir = run.path.clone();
    let written = run.write("config.json", format!("{config_json}\n").as_bytes());
    let result = match written {
        Err(e) => Err(CommandError::Io(e)),
        Ok(_) => match (&loaded, inv.command) {
            (Some(c), Command::Simulate) => commands::simulate(c, &mut run),
            (Some(c), Command::Verify) => commands::verify_assumptions(c, &mut run),
            (Some(c), Command::Sweep) => commands::sweep(c, &mut run),
            (_, Command::Lemmas) => commands::lemmas(seed, inv.fault_offset, &mut run),
            (None, _) => unreachable!("config presence checked above"),
        },
    };
    let (exit_code, message) = match &result {
        Ok(Verdict::Pass) => (EXIT_OK, None),
        Ok(Verdict::Fail) => (EXIT_ASSUMPTION, Some(format!("{} reported a failing verdict", inv.command.name()))),
        Err(e) => (exit_code_of(e), Some(e.to_string())),
    };
    let threads = rayon::current_num_threads();
    if let Err(e) = run.finish(&config_json, threads, exit_code, message.clone()) {
        return Outcome {
            exit_code: EXIT_IO,
            run_dir: Some(dir),
            message: Some(format!("cannot write manifest: {e}")),
        };
    }
    Outcome {
        exit_code,
        run_dir: Some(dir),
        message,
    }
}
