use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use midlevel::commands::{self, CliError};
use midlevel_core::datamodel::Split;

/// Mid-level discriminative pattern learning on synthetic person boxes.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the iterative pipeline and write the model bundle and reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dataset file or directory containing dataset.bin.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run every stage on a single thread.
        #[arg(long)]
        deterministic: bool,
    },
    /// Evaluate a bundle on one split; prints the report CSV.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        split: EvalSplit,
    },
    /// Write a per-cluster report and exemplar tiles.
    ExportClusters {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the configured network.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Parameters checked per weight or bias block.
        #[arg(long, default_value_t = 64)]
        per_block: usize,
    },
}

const GRADCHECK_LIMIT: f64 = 1e-3;

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, &out),
        Command::Run {
            config,
            data,
            out,
            deterministic,
        } => commands::run(&config, &data, &out, deterministic),
        Command::Eval { bundle, data, split } => {
            let split = match split {
                EvalSplit::Val => Split::Val,
                EvalSplit::Test => Split::Test,
            };
            print!("{}", commands::eval(&bundle, &data, split)?);
            Ok(())
        }
        Command::ExportClusters { bundle, out } => commands::export_clusters(&bundle, &out),
        Command::Gradcheck { config, per_block } => {
            let err = commands::gradcheck(&config, per_block)?;
            println!("max_relative_error={err:e}");
            if err > GRADCHECK_LIMIT {
                return Err(CliError::Failed(format!("gradient error {err:e} exceeds {GRADCHECK_LIMIT:e}")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
