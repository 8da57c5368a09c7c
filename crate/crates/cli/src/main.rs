mod config;
mod report;

use std::env;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use care_core::error::{CareError, Result};
use care_core::evalharness::{run_eval, EvalConfig, MetricKind};
use care_core::finetune::{run_finetune, Base, FinetuneConfig, VLA_DIR};
use care_core::parallel::Exec;
use care_core::pretrain::{run_pretraining, PretrainConfig, FINAL_DIR};
use care_core::synthworld::dataset::{generate_dataset, GenConfig};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

const DATA_ENV: &str = "CARE_DATA_ROOT";

#[derive(Parser)]
#[command(name = "care", about = "Synthetic-world latent-action pretraining, fine-tuning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory dataset into --out.
    Gen(Common),
    /// Pretrain on the dataset's video-text split.
    Pretrain(Staged),
    /// Fine-tune adapters and an action head on the labeled split.
    Finetune {
        #[command(flatten)]
        staged: Staged,
        /// Pretrained run directory or checkpoint.
        #[arg(long, conflicts_with = "scratch")]
        checkpoint: Option<PathBuf>,
        /// Start from a randomly initialised base instead.
        #[arg(long)]
        scratch: bool,
    },
    /// Compute metrics for a checkpoint and write one report per metric.
    Eval {
        #[command(flatten)]
        staged: Staged,
        /// Run directory or checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subset of lpmse,spcfc,semantic,rollout.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
    },
    /// Loss curves, comparison tables and success-rate tables for run directories.
    Report {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; keys missing from the file take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted override, e.g. model.d_l=64 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Staged {
    #[command(flatten)]
    common: Common,
    /// Dataset root; defaults to $CARE_DATA_ROOT.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run sequentially instead of data-parallel.
    #[arg(long)]
    sequential: bool,
}

impl Staged {
    fn data(&self) -> Result<PathBuf> {
        self.data
            .clone()
            .or_else(|| env::var_os(DATA_ENV).map(PathBuf::from))
            .ok_or_else(|| CareError::Input(format!("no dataset: pass --data or set {DATA_ENV}")))
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }
}

/// Accepts a checkpoint directory or a run directory holding one.
fn resolve_checkpoint(p: &Path) -> PathBuf {
    for sub in [VLA_DIR, FINAL_DIR] {
        if p.join(sub).join("manifest.json").exists() {
            return p.join(sub);
        }
    }
    if p.join("ft").join(VLA_DIR).join("manifest.json").exists() {
        return p.join("ft").join(VLA_DIR);
    }
    p.to_path_buf()
}

fn command() -> clap::Command {
    Cli::command()
        .mut_subcommand("gen", |c| c.after_help(config::schema_help::<GenConfig>()))
        .mut_subcommand("pretrain", |c| c.after_help(config::schema_help::<PretrainConfig>()))
        .mut_subcommand("finetune", |c| c.after_help(config::schema_help::<FinetuneConfig>()))
        .mut_subcommand("eval", |c| c.after_help(config::schema_help::<EvalConfig>()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let cfg: GenConfig = config::load(c.config.as_deref(), &c.overrides, c.seed)?;
            let m = generate_dataset(&cfg, &c.out)?;
            log::info!("wrote {} trajectories to {}", m.n_trajectories, c.out.display());
        }
        Command::Pretrain(s) => {
            let c = &s.common;
            let cfg: PretrainConfig = config::load(c.config.as_deref(), &c.overrides, c.seed)?;
            let dir = run_pretraining(&cfg, &s.data()?, &c.out)?;
            log::info!("final checkpoint at {}", dir.display());
        }
        Command::Finetune { staged: s, checkpoint, scratch } => {
            let c = &s.common;
            let cfg: FinetuneConfig = config::load(c.config.as_deref(), &c.overrides, c.seed)?;
            let ck = checkpoint.as_deref().map(resolve_checkpoint);
            let base = match (&ck, scratch) {
                (Some(p), false) => Base::Pretrained(p),
                (None, true) => Base::Scratch,
                _ => return Err(CareError::Input("finetune needs --checkpoint or --scratch".into())),
            };
            let dir = run_finetune(&cfg, base, &s.data()?, &c.out, s.exec())?;
            log::info!("policy checkpoint at {}", dir.display());
        }
        Command::Eval { staged: s, checkpoint, metrics } => {
            let c = &s.common;
            let cfg: EvalConfig = config::load(c.config.as_deref(), &c.overrides, c.seed)?;
            let ck = resolve_checkpoint(&checkpoint);
            let metrics: Vec<MetricKind> = match metrics {
                Some(m) => m.iter().map(|s| s.parse()).collect::<Result<_>>()?,
                None => {
                    let mut m = vec![MetricKind::LpMse, MetricKind::Spcfc, MetricKind::Semantic];
                    if ck.ends_with(VLA_DIR) {
                        m.push(MetricKind::Rollout);
                    }
                    m
                }
            };
            for p in run_eval(&cfg, &ck, &s.data()?, &metrics, &c.out, s.exec())? {
                println!("{}", p.display());
            }
        }
        Command::Report { out, runs } => {
            for p in report::report(&runs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
