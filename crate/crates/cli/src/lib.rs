//! Command-line front end for training, synthesis and evaluation.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod figures;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use cwdm::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

/// What a subcommand achieved when it did not fail outright.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    Partial(String),
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Request(_)
        | Error::Registry(_)
        | Error::Data(_)
        | Error::Timestep { .. }
        | Error::PaddingRequired { .. }
        | Error::Shape(_) => EXIT_VALIDATION,
        Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) | Error::NonFiniteLoss { .. } => EXIT_INTERNAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "cwdm", version, about = "Conditional wavelet diffusion for missing MR modality synthesis")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration sources shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of full-scale defaults.
    #[arg(long)]
    pub toy: bool,
    /// Override any config key, e.g. `--set train.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic four-modality dataset.
    GenerateToy(commands::data::GenerateToyArgs),
    /// Clip and normalize every volume of a dataset tree.
    Preprocess(commands::data::PreprocessArgs),
    /// Train the model for one target modality.
    Train(commands::train::TrainArgs),
    /// Train all four target models and write the registry.
    TrainAll(commands::train::TrainAllArgs),
    /// Drop one modality per subject and write the manifest.
    Pseudoval(commands::data::PseudovalArgs),
    /// Generate missing modalities for one case or a manifest.
    Synthesize(commands::synth::SynthesizeArgs),
    /// Score predictions against ground truth.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Run the skip × schedule × width grid.
    Ablate(ablate::AblateArgs),
    /// Middle-slice panels comparing real and synthetic volumes.
    Figures(figures::FiguresArgs),
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => tracing::Level::WARN,
        (false, 0) => tracing::Level::INFO,
        (false, 1) => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_target(false)
        .try_init();
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose, cli.quiet);
    let result = match cli.command {
        Command::GenerateToy(a) => commands::data::generate_toy(a),
        Command::Preprocess(a) => commands::data::preprocess(a),
        Command::Train(a) => commands::train::train(a),
        Command::TrainAll(a) => commands::train::train_all(a),
        Command::Pseudoval(a) => commands::data::pseudoval(a),
        Command::Synthesize(a) => commands::synth::synthesize(a),
        Command::Evaluate(a) => commands::evaluate::evaluate(a),
        Command::Ablate(a) => ablate::ablate(a),
        Command::Figures(a) => figures::figures(a),
    };
    match result {
        Ok(Outcome::Complete) => EXIT_OK,
        Ok(Outcome::Partial(msg)) => {
            eprintln!("partial failure: {msg}");
            EXIT_PARTIAL
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
