//! `patchgrid`: prepare, train, evaluate, embed and run patch-grid
//! classifiers on survey frames.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use patchgrid_pipeline::PipelineError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Data(_) => "data",
            Self::Numeric(_) => "numeric",
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Numeric(m) => m,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let m = e.to_string();
        match e {
            PipelineError::Numeric(_) => Self::Numeric(m),
            e if e.is_data_error() => Self::Data(m),
            _ => Self::Usage(m),
        }
    }
}

impl From<patchgrid_core::Error> for CliError {
    fn from(e: patchgrid_core::Error) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<patchgrid_nn::NnError> for CliError {
    fn from(e: patchgrid_nn::NnError) -> Self {
        PipelineError::from(e).into()
    }
}

#[derive(Parser, Debug)]
#[command(name = "patchgrid", version, about = "Patch-grid seagrass classification pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON configuration file (flags take precedence over it)
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic step
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation passes
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only log errors
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic survey tree and its manifest
    Synth(commands::SynthArgs),
    /// Build a split manifest and patch index from a survey tree
    Prepare(commands::PrepareArgs),
    /// Train a classifier and write a checkpoint
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a manifest split
    Eval(commands::EvalArgs),
    /// k-fold cross validation over the Train records
    Cv(commands::CvArgs),
    /// t-SNE of penultimate-layer features
    Embed(commands::EmbedArgs),
    /// Classify every grid cell of whole frames and render overlays
    Infer(commands::InferArgs),
    /// Print the resolved configuration (defaults, file, then flags)
    Config(commands::ConfigArgs),
}

fn init_logging(quiet: bool) {
    let level = if quiet { log::LevelFilter::Error } else { log::LevelFilter::Info };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("PATCHGRID_LOG")
        .format(|buf, record| writeln!(buf, "{} {:<5} {}", buf.timestamp_millis(), record.level(), record.args()))
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                    ExitCode::from(2)
                } else {
                    ExitCode::SUCCESS
                };
            }
            let text = e.render().to_string();
            let line = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(2);
        }
    };
    init_logging(cli.global.quiet);
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.message().replace('\n', " ");
            eprintln!("error[{}]: {line}", e.tag());
            ExitCode::from(e.code())
        }
    }
}
