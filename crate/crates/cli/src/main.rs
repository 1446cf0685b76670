//! `bandflow`: data generation, toy training runs, sampling and metrics.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use bandflow::harness::config::KvConfig;
use clap::{error::ErrorKind, Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bandflow", version, about = "Toy flow-matching accompaniment and melody pipelines")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand. They override `--config` values.
#[derive(Args, Debug, Default)]
struct Common {
    /// key=value settings file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// flow2d | accomp | melody | style
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output directory (or file, for eval-melody)
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Guidance scale used when sampling
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Sampler or routing trace CSV
    #[arg(long, global = true, value_name = "PATH")]
    trace: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic dataset for inspection
    GenData,
    /// Train a model and write its checkpoint, losses and report
    Train,
    /// Generate from a trained checkpoint
    Sample,
    /// Compare generated and reference note files (or directories)
    EvalMelody { gen: PathBuf, gt: PathBuf },
    /// F0 frame error between two F0 CSV tracks
    EvalF0 { gen: PathBuf, gt: PathBuf },
    /// Dump accompaniment routing decisions
    RouteTrace,
    /// Finite-difference check of every differentiable op
    Gradcheck,
}

pub enum Failure {
    Usage(String),
    Runtime(bandflow::Error),
}

impl From<bandflow::Error> for Failure {
    fn from(e: bandflow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl Common {
    /// Config file values with the command-line flags laid over them.
    fn settings(&self) -> Result<KvConfig, Failure> {
        let mut kv = match &self.config {
            Some(p) => KvConfig::read(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
            None => KvConfig::default(),
        };
        if let Some(v) = self.seed {
            kv.set("seed", v);
        }
        if let Some(v) = &self.model {
            kv.set("model", v);
        }
        if let Some(v) = self.steps {
            kv.set("steps", v);
        }
        if let Some(v) = &self.out {
            kv.set("out", v.display());
        }
        if let Some(v) = self.gamma {
            kv.set("gamma", v);
        }
        if let Some(v) = &self.trace {
            kv.set("trace", v.display());
        }
        Ok(kv)
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("VBND_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::Usage(format!("VBND_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    let kv = cli.common.settings()?;
    match cli.cmd {
        Cmd::GenData => commands::gen_data(&kv),
        Cmd::Train => commands::train(&kv),
        Cmd::Sample => commands::sample(&kv),
        Cmd::EvalMelody { gen, gt } => commands::eval_melody(&gen, &gt, cli.common.out.as_deref()),
        Cmd::EvalF0 { gen, gt } => commands::eval_f0(&gen, &gt),
        Cmd::RouteTrace => commands::route_trace(&kv),
        Cmd::Gradcheck => commands::gradcheck(&kv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
