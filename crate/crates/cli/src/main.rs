mod commands;
mod provenance;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use settings::Settings;

/// Train small transformer LMs with activation regularizers and evaluate
/// them with kNN-LM retrieval.
#[derive(Debug, Parser)]
#[command(name = "knnlm", version)]
struct Cli {
    /// JSON file whose keys mirror the long flags (flags win)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    settings: Settings,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Write a seeded synthetic train/valid corpus
    SynthCorpus,
    /// Train a model; writes vocab.tsv, model.ckpt and train_metrics.json
    Train,
    /// Build the datastore (and optionally an IVF index) from a checkpoint
    BuildDatastore,
    /// Validation perplexity of the LM and the interpolated kNN-LM
    Eval,
    /// Validation perplexity over a grid of interpolation weights
    SweepLambda,
    /// Frequency/loss histograms and GMM clustering of two checkpoints
    Analyze,
}

/// Marks errors caused by the invocation rather than the data.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    use knnlm::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Divergence(_) => EXIT_DIVERGENCE,
                E::Config(_) | E::InvalidArgument(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let run = Settings::load(cli.settings, cli.config.as_deref()).and_then(|s| {
        std::fs::create_dir_all(s.out_dir())?;
        match cli.command {
            Command::SynthCorpus => commands::synth_corpus(&s),
            Command::Train => commands::train(&s),
            Command::BuildDatastore => commands::build_datastore(&s),
            Command::Eval => commands::eval(&s),
            Command::SweepLambda => commands::sweep_lambda(&s),
            Command::Analyze => commands::analyze(&s),
        }
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
