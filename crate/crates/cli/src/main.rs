mod commands;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fastbvp_core::Error;

/// Pulse extraction from spatial-temporal color maps.
#[derive(Debug, Parser)]
#[command(name = "fastbvp", version)]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Model configuration JSON (defaults to the built-in configuration).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth {
        /// Corpus specification JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus and keep the best validation checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training configuration JSON.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Separate validation corpus. Without it the last
        /// `--val-fraction` of the corpus is held out.
        #[arg(long)]
        val_corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
    },
    /// Reconstruct the pulse of one clip and report HR and HRV.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Spatial-temporal map CSV.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        sample_rate: f64,
    },
    /// HR metrics of the model and the GREEN, CHROM and POS baselines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter count and per-layer FLOPs.
    Budget {
        #[arg(long, value_delimiter = ',', default_values_t = [450usize, 900])]
        frames: Vec<usize>,
        /// Also write budget.json and a run manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the band-filtered traces of a clip.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        sample_rate: f64,
    },
}

/// 2 for bad input, configuration or files; 3 when a valid run fails.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. }
        | Error::InsufficientSignal(_)
        | Error::Degenerate(_)
        | Error::CorrelationUndefined(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FASTBVP_LOG", "warn"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
