use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use kvprobe::eviction::Policy;
use kvprobe::harness::experiments::Budget;
use kvprobe_cli::commands::{cmd_eval, cmd_generate, cmd_init, cmd_pipeline, cmd_train_soft};
use kvprobe_cli::pipeline::Suite;
use kvprobe_cli::{load_config, RunConfig};

#[derive(Parser)]
#[command(
    name = "kvprobe",
    version,
    about = "KV-cache eviction with trainable soft-token probes"
)]
struct Cli {
    /// Flat key-value config, or a manifest to replay.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and optionally pre-train a base model.
    Init {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the soft-token bank of a checkpoint.
    TrainSoft {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text file, one sample per line; defaults to the configured task mix.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an evaluation suite and write CSV/JSON results.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// budget, degradation, needle, softcount or all.
        #[arg(long, default_value = "budget")]
        suite: Suite,
        /// Restricts the sweep to one policy.
        #[arg(long)]
        policy: Option<Policy>,
        /// Restricts the sweep to one budget (tokens, or a fraction like 0.25).
        #[arg(long)]
        budget: Option<Budget>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prefill, evict and decode one prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long, default_value = "judgeq")]
        policy: Policy,
        #[arg(long)]
        budget: Budget,
        #[arg(long, default_value_t = 16)]
        max_new: usize,
        /// Writes the eviction plan as CSV.
        #[arg(long)]
        plan_out: Option<PathBuf>,
    },
    /// init, train-soft and the budget and degradation suites into one directory.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let log = |m: &str| eprintln!("{m}");
    match cli.command {
        Command::Init { out } => {
            cmd_init(&cfg, &out, log)?;
        }
        Command::TrainSoft {
            checkpoint,
            corpus,
            out,
        } => {
            cmd_train_soft(&cfg, &checkpoint, corpus.as_deref(), &out, log)?;
        }
        Command::Eval {
            checkpoint,
            suite,
            policy,
            budget,
            out,
        } => {
            if let Some(p) = policy {
                cfg.policies = vec![p.name().to_string()];
            }
            if let Some(b) = budget {
                cfg.budgets = vec![b.to_string()];
            }
            for f in cmd_eval(&cfg, &checkpoint, suite, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Generate {
            checkpoint,
            prompt,
            policy,
            budget,
            max_new,
            plan_out,
        } => {
            let report = cmd_generate(
                &cfg,
                &checkpoint,
                &prompt,
                policy,
                budget,
                max_new,
                plan_out.as_deref(),
            )?;
            print!("{}", report.render());
        }
        Command::Pipeline { out } => {
            let run = cmd_pipeline(&cfg, &out, |m| eprintln!("{m}")).context("pipeline")?;
            println!("{}", serde_json::to_string_pretty(&run.manifest.outputs)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
