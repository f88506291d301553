use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cbt_cli::commands::{self, Ctx, Outcome, TrainOpts};
use cbt_cli::config::RunConfig;
use cbt_cli::exit_code;
use cbt_core::{kvtext, Error, Result};

#[derive(Parser)]
#[command(name = "cbt", version, about = "Continual Barlow Twins pretraining and evaluation")]
struct Cli {
    /// Config file of key=value lines (see `cbt defaults`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory holding data/ and runs/.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Master seed for data generation, initialization and augmentation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set cbt.lambda=0.1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Train {
    /// Continue an unfinished run in place.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs, leaving a resumable run.
    #[arg(long, value_name = "EPOCHS")]
    interrupt_after: Option<usize>,
}

impl Train {
    fn opts(&self) -> TrainOpts {
        TrainOpts {
            resume: self.resume,
            interrupt_after: self.interrupt_after,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the documented default configuration.
    Defaults,
    /// Generate (or verify) the synthetic task datasets.
    GenTasks,
    /// Train on the first task from a fresh initialization.
    Pretrain(Train),
    /// Train on the next task, anchored to a previous snapshot.
    Continue {
        #[arg(long)]
        snapshot: PathBuf,
        /// Checkpoint to start from; defaults to the one beside the snapshot.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        train: Train,
    },
    /// Train a fresh encoder on the union of the first k tasks.
    JointBaseline {
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        train: Train,
    },
    /// Fit segmentation probes and write test metrics.
    Probe {
        /// Encoder to probe; omit with baseline=none_pretrain.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarize completed runs.
    Report,
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let file = match &cli.config {
        Some(p) => kvtext::parse(&std::fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    let mut overrides = BTreeMap::new();
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        overrides.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Some(seed) = cli.seed {
        overrides.insert("seed".into(), seed.to_string());
    }
    if let Some(w) = &cli.workdir {
        overrides.insert("workdir".into(), w.display().to_string());
    }
    RunConfig::resolve(file, &overrides)
}

fn run(cli: &Cli) -> Result<Outcome> {
    if let Command::Defaults = cli.command {
        print!("{}", RunConfig::documented_defaults());
        return Ok(Outcome::default());
    }
    let ctx = Ctx::new(build_config(cli)?);
    match &cli.command {
        Command::Defaults => unreachable!(),
        Command::GenTasks => commands::gen_tasks(&ctx),
        Command::Pretrain(t) => commands::pretrain(&ctx, &t.opts()),
        Command::Continue {
            snapshot,
            checkpoint,
            train,
        } => commands::continue_task(&ctx, snapshot, checkpoint.as_deref(), &train.opts()),
        Command::JointBaseline { k, train } => commands::joint_baseline(&ctx, *k, &train.opts()),
        Command::Probe { checkpoint } => commands::probe(&ctx, checkpoint.as_deref()),
        Command::Report => commands::report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            for line in out.lines {
                println!("{line}");
            }
            if let Some(dir) = out.run_dir {
                println!("run_dir: {}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
