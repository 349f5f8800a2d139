//! `attreg`: dataset generation, training, registration, evaluation and the
//! fusion ablation from the command line.

mod ablate;
mod common;
mod config;
mod eval;
mod gen;
mod register;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use attreg::Error;

#[derive(Debug, Parser)]
#[command(name = "attreg", version, about = "Rigid point cloud registration toolkit", args_override_self = true)]
struct Cli {
    /// Worker threads; 0 uses one per core. Outputs never depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// File of key=value lines supplying defaults for the command's flags.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a registration dataset from PLY models or toy shapes.
    Gen(gen::GenArgs),
    /// Train the network on a generated dataset.
    Train(train::TrainArgs),
    /// Register two PLY clouds.
    Register(register::RegisterArgs),
    /// Evaluate a registration method on a dataset.
    Eval(eval::EvalArgs),
    /// Train and compare the four feature-fusion variants.
    Ablate(ablate::AblateArgs),
    /// Register two PLY clouds with point-to-point ICP.
    Icp(register::IcpArgs),
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            Error::Numeric(_) | Error::State(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn run(argv: Vec<std::ffi::OsString>) -> CliResult<()> {
    let argv = config::merge_config_file(argv)?;
    let cli = Cli::try_parse_from(&argv).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                let _ = e.print();
                std::process::exit(0);
            }
            _ => CliError::Usage(e.render().to_string()),
        }
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    match cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Register(a) => register::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Ablate(a) => ablate::run(a),
        Command::Icp(a) => register::run_icp(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().trim_end());
            ExitCode::from(e.code())
        }
    }
}
