//! Command-line front end: training, evaluation, the tabular bound
//! checker, the loss timing benchmark and metric plots.

mod commands;
mod plot;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BenchArgs, EvalArgs, TrainArgs, VerifyArgs};
use plot::PlotArgs;

#[derive(Parser, Debug)]
#[command(name = "bsmpc", version, about = "Latent MPC with a bisimulation encoder loss")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a task; extra `--section.key value` flags override the config.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the noise-free planner.
    Eval(EvalArgs),
    /// Exact bisimulation metric and aggregation bounds on tabular MDPs.
    BisimVerify(VerifyArgs),
    /// Time the per-step-parallel objective against the sequential reference.
    BenchLoss(BenchArgs),
    /// Render metrics CSV columns to SVG.
    Plot(PlotArgs),
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    Bound(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Bound(_) => 3,
        }
    }
}

impl From<bsmpc_core::Error> for CliError {
    fn from(e: bsmpc_core::Error) -> Self {
        use bsmpc_core::Error as E;
        match e {
            E::Config { .. } | E::Parse { .. } | E::UnknownParam(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Pull `--a.b value` and `--a.b=value` config overrides out of the
/// argument list; everything else goes to clap.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|n| n.contains('.')));
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| CliError::Usage(format!("--{k} needs a value")))?;
                    overrides.push((k.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn run() -> Result<(), CliError> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return Ok(());
            }
            let msg = e.to_string();
            return Err(CliError::Usage(msg.strip_prefix("error: ").unwrap_or(&msg).to_string()));
        }
    };
    if !overrides.is_empty() && !matches!(cli.cmd, Command::Train(_)) {
        return Err(CliError::Usage("dotted config overrides only apply to `train`".into()));
    }
    match cli.cmd {
        Command::Train(a) => commands::train(a, overrides),
        Command::Eval(a) => commands::eval(a),
        Command::BisimVerify(a) => commands::bisim_verify(a),
        Command::BenchLoss(a) => commands::bench_loss(a),
        Command::Plot(a) => plot::plot(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Usage(m) | CliError::Runtime(m) | CliError::Bound(m)) = &e;
            eprintln!("error: {}", m.trim_end());
            ExitCode::from(e.code())
        }
    }
}
