use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use grfu::cli::{self, Options};

#[derive(Parser)]
#[command(name = "grfu", version, about = "Gated recurrent fusion experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Train a model, resuming from --checkpoint if given.
    Train,
    /// Score a checkpoint on a dataset.
    Eval,
    /// Export pooled fusion gates of a gated model.
    Gates,
    /// Finite-difference check of a model's gradients.
    Gradcheck,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(cli::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let opts = Options {
        config: args.config,
        seed: args.seed,
        out: args.out,
        checkpoint: args.checkpoint,
        dataset: args.dataset,
    };
    let mut stdout = std::io::stdout().lock();
    let result = match args.command {
        Command::Gen => cli::gen(&opts, &mut stdout),
        Command::Train => cli::train(&opts, &mut stdout),
        Command::Eval => cli::eval(&opts, &mut stdout),
        Command::Gates => cli::gates(&opts, &mut stdout),
        Command::Gradcheck => cli::gradcheck(&opts, &mut stdout),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
