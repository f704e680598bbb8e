use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvgate::commands::{self, RunArgs};
use kvgate::error::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "kvgate", version, about = "Learned KV-cache eviction experiments")]
struct Cli {
    /// Worker threads for the parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Distill the per-layer indexers from the teacher.
    TrainIndexer {
        #[command(flatten)]
        common: Common,
    },
    /// Train the memory modules on top of an indexer checkpoint.
    TrainMemory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Keep the indexer weights fixed.
        #[arg(long)]
        freeze_indexer: bool,
    },
    /// Evaluate policies across compression ratios.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Long decode under fixed budgets.
    DecodeSim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Turn metrics files into CSV tables and a summary.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quick invariant checks.
    Selftest,
}

fn run_args(c: Common, checkpoint: Option<PathBuf>, freeze_indexer: bool) -> RunArgs {
    RunArgs {
        config: c.config,
        out: c.out,
        seed: c.seed,
        checkpoint,
        freeze_indexer,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::TrainIndexer { common } => commands::train_indexer(&run_args(common, None, false)),
        Command::TrainMemory { common, checkpoint, freeze_indexer } => {
            commands::train_memory(&run_args(common, checkpoint, freeze_indexer))
        }
        Command::Sweep { common, checkpoint } => commands::sweep(&run_args(common, checkpoint, false)),
        Command::DecodeSim { common, checkpoint } => commands::decode_sim(&run_args(common, checkpoint, false)),
        Command::Report { inputs, out } => commands::report(&inputs, &out),
        Command::Selftest => {
            let checks = commands::selftest();
            for c in &checks {
                println!("{} {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            match checks.iter().filter(|c| !c.pass).count() {
                0 => Ok(()),
                n => Err(HarnessError::SelfTest(n)),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KVGATE_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
