//! `mimicdet` command-line front end.
//!
//! Any `--key=value` argument whose key is a config field is treated as a
//! config override and applied after the `--config` file.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimicdet::config::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "mimicdet", version, about = "Train, evaluate and run a mimicking one-stage detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file, applied before command-line overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and evaluate it on the eval split.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint.
    Eval(commands::EvalArgs),
    /// Detect objects in images and write text records and overlays.
    Infer(commands::InferArgs),
    /// Write a synthetic dataset.
    Gen(commands::GenArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(commands::GradcheckArgs),
    /// Train several variants over several seeds and compare them.
    Ablate(commands::AblateArgs),
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration: exit 1.
    Usage(String),
    /// Anything that went wrong while running: exit 2.
    Runtime(String),
}

impl From<mimicdet::Error> for Failure {
    fn from(e: mimicdet::Error) -> Self {
        match e {
            mimicdet::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Splits config overrides out of the raw arguments.
fn split_overrides(args: Vec<OsString>) -> (Vec<OsString>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let is_override = a
            .to_str()
            .and_then(|s| s.strip_prefix("--"))
            .and_then(|s| s.split_once('='))
            .is_some_and(|(k, _)| TrainConfig::KEYS.contains(&k));
        if is_override {
            overrides.push(a.to_string_lossy().into_owned());
        } else {
            rest.push(a);
        }
    }
    (rest, overrides)
}

fn main() -> ExitCode {
    mimicdet::par::init_thread_pool();
    let (args, overrides) = split_overrides(std::env::args_os().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a, &overrides),
        Command::Eval(a) => commands::eval(a, &overrides),
        Command::Infer(a) => commands::infer(a, &overrides),
        Command::Gen(a) => commands::gen(a, &overrides),
        Command::Gradcheck(a) => commands::gradcheck(a, &overrides),
        Command::Ablate(a) => commands::ablate(a, &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
