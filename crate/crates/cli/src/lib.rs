//! Command-line driver: `train`, `finetune`, `evaluate`, `rollout` and
//! `ablate`, each writing its outputs and a resolved config under `--out`.

pub mod config;

mod commands;
mod score;
mod setup;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

pub use config::RunConfig;

/// Exit status for usage and config errors.
pub const EXIT_CONFIG: i32 = 1;
/// Exit status for failures while running.
pub const EXIT_RUNTIME: i32 = 2;

/// Marker left in the output directory when a run fails.
pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Core(#[from] karina_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "karina", version, about = "Train, evaluate and roll out the geocyclic ConvNext emulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Train,
    Finetune,
    Evaluate,
    Rollout,
    Ablate,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch on one-day pairs
    Train(CommonArgs),
    /// Continue training a checkpoint with lag-augmented phases
    Finetune(CommonArgs),
    /// Per-channel, per-lead RMSE and ACC on the test window
    Evaluate(CommonArgs),
    /// Long autoregressive forecast with drift diagnostics
    Rollout(CommonArgs),
    /// Train the Plain, Padded and Padded+SENet variants and compare them
    Ablate(CommonArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Seed for all randomness
    #[arg(long)]
    seed: Option<u64>,
}

impl Command {
    fn split(self) -> (CommandKind, CommonArgs) {
        match self {
            Command::Train(a) => (CommandKind::Train, a),
            Command::Finetune(a) => (CommandKind::Finetune, a),
            Command::Evaluate(a) => (CommandKind::Evaluate, a),
            Command::Rollout(a) => (CommandKind::Rollout, a),
            Command::Ablate(a) => (CommandKind::Ablate, a),
        }
    }
}

/// Output directory of one run.
pub struct Outputs {
    pub dir: PathBuf,
}

impl Outputs {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        std::fs::write(&path, contents).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Runs one command and returns the process exit code. Messages go to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let (kind, args) = cli.command.split();
    let cfg = match RunConfig::load(args.config.as_deref(), &args.set, args.seed) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let out = Outputs { dir: args.out };
    if let Err(source) = std::fs::create_dir_all(&out.dir) {
        eprintln!("error: {}: {source}", out.dir.display());
        return EXIT_RUNTIME;
    }
    let _ = std::fs::remove_file(out.path(FAILED_MARKER));
    match commands::dispatch(kind, cfg, &out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == EXIT_RUNTIME {
                let _ = std::fs::write(out.path(FAILED_MARKER), format!("{e}\n"));
            }
            e.exit_code()
        }
    }
}
