//! `signalopt`: drives the optimize → collect → train → evaluate → report
//! pipeline over one run directory.
//!
//! Exit codes: 0 on success, 1 for configuration or input errors (nothing is
//! written), 2 for failures while a stage runs (including divergence).

mod config;
mod plot;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::Run;

#[derive(Parser, Debug)]
#[command(name = "signalopt", version, about = "Cycle-based traffic signal optimization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize the network's initial plan with evolution strategies.
    Es(Args),
    /// Record a batch of cycles around the optimized plan.
    Collect(Args),
    /// Train decentralized controllers offline from the batch.
    Train(Args),
    /// Score the initial plan, the optimized plan and trained controllers.
    Eval(Args),
    /// Summarize the evaluation as a table and a chart.
    Report(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed for every stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which component combinations `train` runs.
    #[arg(long, value_enum, default_value_t = AblationMode::Off)]
    ablation: AblationMode,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AblationMode {
    /// Train only the component settings named in the config.
    #[default]
    Off,
    /// Train all six component combinations.
    Full,
}

/// A stage failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<signalopt::Error> for Failure {
    fn from(e: signalopt::Error) -> Self {
        use signalopt::Error as E;
        match e {
            E::Config(_)
            | E::InvalidNetwork(_)
            | E::Shape(_)
            | E::EmptyPlan
            | E::UnknownPhase { .. }
            | E::UnknownIntersection(_)
            | E::EmptyBatch
            | E::Json(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Stage = fn(&Run, AblationMode) -> Result<(), Failure>;

fn run(command: Command) -> Result<(), Failure> {
    let (args, stage): (&Args, Stage) = match &command {
        Command::Es(a) => (a, |r, _| stages::es(r)),
        Command::Collect(a) => (a, |r, _| stages::collect(r)),
        Command::Train(a) => (a, stages::train),
        Command::Eval(a) => (a, |r, _| stages::eval(r)),
        Command::Report(a) => (a, |r, _| stages::report(r)),
    };
    let run = Run::load(&args.config, args.seed, args.out.as_deref())?;
    stage(&run, args.ablation)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("signalopt: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
