mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "jima",
    version,
    about = "Joint multi-source preference models: simulate, train, evaluate and replicate"
)]
pub struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic data set.
    Simulate {
        /// Generator spec, or an experiment spec whose data section is used.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split a data set, fit one joint model and save it.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a saved model on the test cells of its split.
    Evaluate {
        /// The training config the model was produced with.
        #[arg(long)]
        config: PathBuf,
        /// Directory holding model.json and split.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a replication experiment and write its result tables.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        /// Comma-separated method labels or kinds to keep.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Render a results CSV as a text table.
    Report {
        /// results.csv written by `run`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of randomized instances.
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::dispatch(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation = err.chain().any(|c| {
                c.downcast_ref::<jima_core::Error>()
                    .is_some_and(jima_core::Error::is_validation)
                    || c.downcast_ref::<commands::Invalid>().is_some()
            });
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
