use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pvlu_core::gradcheck::Fault;
use pvlu_lab::commands::{self, Overrides};
use pvlu_lab::{exit, LabResult};

#[derive(Parser)]
#[command(
    name = "pvlu",
    version,
    about = "Train, compare and fine-tune small CNNs with PVLU activations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Trials run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            epochs: self.epochs,
            jobs: Some(self.jobs),
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed.
    Train(RunArgs),
    /// Paired-seed comparison of the configured activations.
    Compare(RunArgs),
    /// Swap ReLU for PVLU in a checkpoint and fine-tune.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every activation and a tiny CNN.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampled points per activation case.
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Plot test accuracy from trial CSVs.
    Plot {
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        /// SVG file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write small synthetic datasets and a toy config.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> LabResult<u8> {
    match cli.command {
        Command::Train(a) => commands::cmd_train(&a.config, &a.overrides()).map(|_| exit::OK),
        Command::Compare(a) => commands::cmd_compare(&a.config, &a.overrides()).map(|_| exit::OK),
        Command::Finetune { run, checkpoint } => {
            commands::cmd_finetune(&run.config, &checkpoint, &run.overrides()).map(|_| exit::OK)
        }
        Command::Gradcheck {
            seed,
            points,
            inject_fault,
        } => {
            let fault = match inject_fault.as_deref() {
                None => None,
                Some(name) => Some(Fault::parse(name).ok_or_else(|| {
                    pvlu_lab::LabError::config(format!("unknown fault {name:?}"))
                })?),
            };
            commands::cmd_gradcheck(seed, points, fault).map(|r| commands::gradcheck_exit(&r))
        }
        Command::Plot { csvs, out } => commands::cmd_plot(&csvs, &out).map(|_| exit::OK),
        Command::Fixtures { out, seed } => commands::cmd_fixtures(&out, seed).map(|files| {
            for f in files {
                println!("{}", f.display());
            }
            exit::OK
        }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
