//! `apyr`: train, run and evaluate coarse-to-fine affine correspondence.

mod commands;
mod config;
mod dataset;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure with the exit code it maps to: 1 for computation, 2 for usage or
/// input errors.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    /// Classifies a library error raised while handling `path`.
    pub fn input(path: &Path, e: affine_pyramid::Error) -> Self {
        let mut err = Self::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    }

    pub fn compute(e: affine_pyramid::Error) -> Self {
        Self { code: 1, message: e.to_string() }
    }
}

impl From<affine_pyramid::Error> for CliError {
    fn from(e: affine_pyramid::Error) -> Self {
        use affine_pyramid::Error as E;
        let code = match e {
            E::Format(_) | E::Io { .. } | E::Shape(_) | E::InvalidInput(_) | E::ImageTooSmall { .. } => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "apyr", version, about = "Coarse-to-fine affine field correspondence")]
struct Cli {
    /// Worker threads; 1 gives the reproducible schedule.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Flat `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train grid levels 1..K, then the pixel level.
    Train(commands::TrainArgs),
    /// Estimate the field between two images with a trained checkpoint.
    Infer(commands::InferArgs),
    /// Score a flow against ground truth, keypoints or masks.
    Eval(commands::EvalArgs),
    /// Generate synthetic pairs with ground-truth fields.
    Synth(commands::SynthArgs),
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck(commands::GradcheckArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Infer(a) => commands::infer(a, cli.seed),
        Command::Eval(a) => commands::eval(a),
        Command::Synth(a) => commands::synth(a, cli.seed),
        Command::Gradcheck(a) => commands::gradcheck(a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("apyr: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
