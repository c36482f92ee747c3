use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ponder_core::benchdata::Split;
use ponder_core::exitpolicy::ExitPolicy;
use ponder_core::harness::{self, Common, RunConfig};
use ponder_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ponder", version, about = "Adaptive-depth early-exit experiments")]
struct Cli {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed. Multi-seed commands run only this seed when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sweeps; defaults to the core count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dataset directory written by `gen-data`; otherwise generated from the config.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/dev/test splits to <out>/data.
    GenData,
    /// Train one model; writes checkpoint.json and epochs.csv.
    Train,
    /// Evaluate a checkpoint under one exit policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// e.g. q_exit:0.5, sample:1234, patience:6, entropy:0.4, fixed:12, expectation
        #[arg(long, default_value = "q_exit:0.5")]
        policy: ExitPolicy,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Q-exit threshold sweep over trained checkpoints.
    SweepQ {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Retrain under each halting prior and report exit depth.
    SweepPrior,
    /// Speed/accuracy table for ponder and PABEE checkpoints.
    Speed {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long = "pabee-checkpoint", required = true)]
        pabee: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Eight-row ablation table.
    Ablation,
    /// Hyperparameter grid search.
    GridSearch,
}

fn run(cli: Cli) -> Result<harness::CommandOutput> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.train.seed = s;
        config.seeds = vec![s];
    }
    let common = Common {
        config,
        out: cli.out,
        data: cli.data,
    };
    match cli.command {
        Command::GenData => harness::cmd_gen_data(&common),
        Command::Train => harness::cmd_train(&common),
        Command::Eval {
            checkpoint,
            policy,
            split,
        } => harness::cmd_eval(&common, &checkpoint, policy, Split::parse(&split)?),
        Command::SweepQ { checkpoints, split } => harness::cmd_sweep_q(&common, &checkpoints, Split::parse(&split)?),
        Command::SweepPrior => harness::cmd_sweep_prior(&common),
        Command::Speed {
            checkpoints,
            pabee,
            split,
        } => harness::cmd_speed(&common, &checkpoints, &pabee, Split::parse(&split)?),
        Command::Ablation => harness::cmd_ablation(&common),
        Command::GridSearch => harness::cmd_grid_search(&common),
    }
}

fn error_line(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            error_line("usage", e.to_string().trim_end());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(out) => {
            for f in &out.files {
                println!("{}", f.display());
            }
            println!("{}", out.manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
