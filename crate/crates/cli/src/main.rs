//! `basofr`: simulate, fit, summarize, evaluate and replicate.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 input or output
//! error, 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use basofr::gibbs::PriorKind;
use basofr::Error;
use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "basofr", version, about = "Bayesian adaptive scalar-on-function regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate curves and responses from the `[simulate]` design.
    Simulate(Shared),
    /// Run the Gibbs sampler and write a draw archive.
    Fit(Shared),
    /// Summarize beta and run the decision analysis on an archive.
    Summarize(Shared),
    /// Score the summaries against the simulation truth.
    Evaluate(Shared),
    /// Run or resume the replicate study of the `[study]` section.
    Replicate(Shared),
}

#[derive(Args, Clone)]
struct Shared {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(PriorKind))]
    prior: Option<PriorKind>,
    /// Number of B-spline basis functions for beta.
    #[arg(long)]
    kb: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    zero_tol: Option<f64>,
}

impl Shared {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            threads: self.threads,
            prior: self.prior,
            kb: self.kb,
            burnin: self.burnin,
            draws: self.draws,
            epsilon: self.epsilon,
            zero_tol: self.zero_tol,
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else if matches!(e, Error::Config(_)) {
        EXIT_CONFIG
    } else {
        EXIT_IO
    }
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    let (shared, command) = match &cli.command {
        Command::Simulate(s) => (s, "simulate"),
        Command::Fit(s) => (s, "fit"),
        Command::Summarize(s) => (s, "summarize"),
        Command::Evaluate(s) => (s, "evaluate"),
        Command::Replicate(s) => (s, "replicate"),
    };
    let fail = |e: Error| (exit_code(&e), e.to_string());
    let mut cfg = RunConfig::load(shared.config.as_deref()).map_err(fail)?;
    cfg.apply(&shared.overrides());
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| (EXIT_CONFIG, format!("thread pool: {e}")))?;
    }
    log::info!("{command}: writing to {}", cfg.out_dir.display());
    match cli.command {
        Command::Simulate(_) => commands::simulate(&cfg),
        Command::Fit(_) => commands::fit_cmd(&cfg),
        Command::Summarize(_) => commands::summarize(&cfg),
        Command::Evaluate(_) => commands::evaluate_cmd(&cfg),
        Command::Replicate(_) => match commands::replicate(&cfg) {
            Ok(0) => Ok(()),
            Ok(k) => return Err((EXIT_NUMERICAL, format!("{k} replicates failed; see {}", commands::FAILURES_TABLE))),
            Err(e) => Err(e),
        },
    }
    .map_err(fail)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
