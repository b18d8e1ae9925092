use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(
    name = "ccdc",
    version,
    about = "Train and evaluate the CT/pathology subtype classifier"
)]
struct Cli {
    /// JSON run configuration; its keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed and the synthetic-data seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic raw cohort.
    GenData,
    /// Extract CT patches and slide patch bags from a raw cohort.
    Preprocess {
        /// Raw-stage manifest.
        manifest: PathBuf,
    },
    /// Train on the hold-out training split of a preprocessed cohort.
    Train {
        /// Preprocessed manifest.
        manifest: PathBuf,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Also run k-fold cross-validation within the training split.
        #[arg(long)]
        cv: bool,
    },
    /// Evaluate a checkpoint in paired and CT-only mode.
    Eval {
        checkpoint: PathBuf,
        /// Preprocessed manifest.
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Finite-difference check of the full loss on the miniature model.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_adjoint: Option<String>,
    },
    /// Paired t-tests between the folds of two metric reports.
    Compare { report_a: PathBuf, report_b: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            commands::exit_code(&e)
        }
    }
}
