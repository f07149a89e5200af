mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

pub const USAGE: &str = "\
usage: sonar-histnet <command> [--config file] [--key value ...]

commands:
  synth      generate the synthetic corpus and its manifest
  ingest     decode, resample, segment and partition the manifest's recordings
  extract    compute cached features, the index and normalization statistics
  train      train every model x feature experiment over all seeds
  evaluate   re-score trained checkpoints on the test partition
  report     collect experiment summaries into result tables

keys use dotted config paths, e.g. --train.lr 0.01 --experiment.features stft,mfcc;
--model, --feature and --out are shorthands for experiment.models,
experiment.features and paths.output.
environment: SONAR_HISTNET_THREADS caps the worker count.";

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or missing prerequisites (exit 1).
    Usage(String),
    /// Failure while doing the work (exit 2).
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<histnet::Error> for CliError {
    fn from(e: histnet::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("SONAR_HISTNET_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("SONAR_HISTNET_THREADS must be a positive integer, got `{}`", raw)))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("cannot start {} worker threads: {}", n, e)))
}

fn run(args: &[String]) -> Result<(), CliError> {
    let Some(command) = args.first() else {
        return Err(CliError::Usage(USAGE.into()));
    };
    if matches!(command.as_str(), "-h" | "--help" | "help") {
        println!("{}", USAGE);
        return Ok(());
    }
    const COMMANDS: [&str; 6] = ["synth", "ingest", "extract", "train", "evaluate", "report"];
    if !COMMANDS.contains(&command.as_str()) {
        return Err(CliError::Usage(format!("unknown command `{}`\n\n{}", command, USAGE)));
    }
    let (file, overrides) = config::parse_overrides(&args[1..])?;
    let cfg = config::resolve(file.as_deref(), &overrides)?;
    init_threads()?;
    match command.as_str() {
        "synth" => commands::synth(&cfg),
        "ingest" => commands::ingest(&cfg),
        "extract" => commands::extract(&cfg),
        "train" => commands::train(&cfg),
        "evaluate" => commands::evaluate(&cfg),
        "report" => commands::report(&cfg),
        _ => unreachable!("command checked above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(match e {
                CliError::Usage(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
