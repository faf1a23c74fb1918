//! `mindalign` command-line driver: world and dataset generation, training,
//! evaluation, scaling and ablation runs, each writing into its own run
//! directory.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mindalign_core::dataset::DatasetError;
use mindalign_core::eval::EvalError;
use mindalign_core::model::ModelError;
use mindalign_core::train::TrainError;
use mindalign_core::world::WorldError;
use thiserror::Error;

pub use config::RunConfig;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;
pub const EXIT_SUBJECT_LEAK: i32 = 6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("subject leak: {0}")]
    SubjectLeak(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::SubjectLeak(_) => EXIT_SUBJECT_LEAK,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::InvalidConfig(_) | WorldError::ImpossibleRank { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::World(w) => w.into(),
            DatasetError::NoSessions | DatasetError::PoolExhausted { .. } | DatasetError::TooManySessions { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::TimestepOutOfRange { .. } | ModelError::Tensor(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::SubjectLeak(s) => CliError::SubjectLeak(format!("`{s}` was seen during pretraining")),
            TrainError::Config(_) | TrainError::NoSubjects | TrainError::BatchTooSmall(_) => {
                CliError::Config(e.to_string())
            }
            TrainError::Unnormalized(_) => CliError::Data(e.to_string()),
            TrainError::Dataset(d) => d.into(),
            TrainError::World(w) => w.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Loss(_) | TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::PoolTooLarge { .. } | EvalError::TooFewItems(_) | EvalError::EmptyGrid | EvalError::NoPrior => {
                CliError::Config(e.to_string())
            }
            EvalError::EmptyRegion(_) => CliError::Data(e.to_string()),
            EvalError::DegenerateFeatures | EvalError::Shape(_) => CliError::Numeric(e.to_string()),
            EvalError::Model(m) => m.into(),
            EvalError::World(w) => w.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Dataset(d) => d.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mindalign", version, about = "Shared-subject fMRI-to-image decoding on a synthetic world")]
pub struct Cli {
    /// Run configuration (TOML, dotted keys). Defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory for this run.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world.
    GenWorld {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate subject datasets for a world.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        world: Option<PathBuf>,
        /// Comma-separated subject ids (default: all).
        #[arg(long)]
        subjects: Option<String>,
    },
    /// Multi-subject pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on a new subject's first sessions.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        sessions: Option<usize>,
    },
    /// Train a single-subject model from random initialization.
    Scratch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        sessions: Option<usize>,
    },
    /// Evaluate a checkpoint on a subject's shared test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
    },
    /// Fine-tuned versus from-scratch performance over session budgets.
    Scaling {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated session budgets, e.g. `1,2,4,8`.
        #[arg(long)]
        sessions: Option<String>,
        /// Comma-separated arms: `pretrained`, `scratch`.
        #[arg(long)]
        arms: Option<String>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Train and evaluate component ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        sessions: Option<usize>,
        /// Comma-separated variants, e.g. `prior,ret,all,mlp`.
        #[arg(long)]
        variants: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenWorld { .. } => "gen-world",
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Scratch { .. } => "scratch",
            Command::Eval { .. } => "eval",
            Command::Scaling { .. } => "scaling",
            Command::Ablate { .. } => "ablate",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenWorld { common }
            | Command::GenData { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Scratch { common, .. }
            | Command::Eval { common, .. }
            | Command::Scaling { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }

    /// Flag values as config overrides.
    fn overrides(&self) -> Vec<String> {
        fn path(key: &str, p: &Option<PathBuf>, out: &mut Vec<String>) {
            if let Some(p) = p {
                out.push(format!("{key}={:?}", p.display().to_string()));
            }
        }
        fn list(s: &str) -> String {
            let items: Vec<String> = s.split(',').map(|x| format!("{:?}", x.trim())).collect();
            format!("[{}]", items.join(", "))
        }
        let mut out = Vec::new();
        if let Some(seed) = self.common().seed {
            out.push(format!("seed={seed}"));
        }
        match self {
            Command::GenWorld { .. } => {}
            Command::GenData { world, subjects, .. } => {
                path("paths.world", world, &mut out);
                if let Some(s) = subjects {
                    out.push(format!("run.subjects={}", list(s)));
                }
            }
            Command::Pretrain { data, .. } => path("paths.data", data, &mut out),
            Command::Finetune {
                data,
                checkpoint,
                subject,
                sessions,
                ..
            } => {
                path("paths.data", data, &mut out);
                path("paths.checkpoint", checkpoint, &mut out);
                out.extend(subject.as_ref().map(|s| format!("run.subject={s:?}")));
                out.extend(sessions.map(|k| format!("run.sessions={k}")));
            }
            Command::Scratch {
                data, subject, sessions, ..
            } => {
                path("paths.data", data, &mut out);
                out.extend(subject.as_ref().map(|s| format!("run.subject={s:?}")));
                out.extend(sessions.map(|k| format!("run.sessions={k}")));
            }
            Command::Eval {
                data,
                checkpoint,
                subject,
                ..
            } => {
                path("paths.data", data, &mut out);
                path("paths.checkpoint", checkpoint, &mut out);
                out.extend(subject.as_ref().map(|s| format!("run.subject={s:?}")));
            }
            Command::Scaling {
                data,
                checkpoint,
                sessions,
                arms,
                seeds,
                ..
            } => {
                path("paths.data", data, &mut out);
                path("paths.checkpoint", checkpoint, &mut out);
                if let Some(s) = sessions {
                    out.push(format!("run.session_grid=[{s}]"));
                }
                if let Some(a) = arms {
                    out.push(format!("run.arms={}", list(a)));
                }
                out.extend(seeds.map(|n| format!("run.n_seeds={n}")));
            }
            Command::Ablate {
                data,
                subject,
                sessions,
                variants,
                ..
            } => {
                path("paths.data", data, &mut out);
                out.extend(subject.as_ref().map(|s| format!("run.subject={s:?}")));
                out.extend(sessions.map(|k| format!("run.sessions={k}")));
                if let Some(v) = variants {
                    out.push(format!("run.variants={}", list(v)));
                }
            }
        }
        out
    }
}

/// Caps the global worker pool from `MINDALIGN_THREADS`.
fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("MINDALIGN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("MINDALIGN_THREADS must be a positive integer, got `{v}`")))?;
    // A pool already built in this process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    overrides.extend(cli.command.overrides());
    let mut cfg = RunConfig::with_overrides(&text, &overrides)?;
    let name = cli.command.name();
    match &cfg.command {
        Some(c) if c != name => {
            return Err(CliError::Config(format!("config is for `{c}`, but `{name}` was invoked")));
        }
        _ => cfg.command = Some(name.to_string()),
    }
    Ok(cfg)
}

/// Runs one command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = init_threads()
        .and_then(|_| load_config(&cli))
        .and_then(|cfg| commands::execute(&cli.command, cfg, &cli.command.common().out));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
