//! Command-line front end: dataset generation, training, synthesis,
//! evaluation and the HTTP inference service.

pub mod commands;
pub mod config;
pub mod service;

use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, Split};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Help text for a flag that overrides a config key: shows the built-in
/// default of that key.
fn from_config(text: &str, key: &str) -> String {
    static DEFAULTS: OnceLock<Vec<(String, String)>> = OnceLock::new();
    let defaults = DEFAULTS.get_or_init(|| RunConfig::default().dotted_keys());
    let value = defaults
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.clone())
        .unwrap_or_else(|| panic!("unknown config key {key}"));
    format!("{text} [default: {value}, or {key} from --config]")
}

#[derive(Debug, Parser)]
#[command(name = "pgsgan", version, about = "Sketch-guided progressive GAN for ultrasound phantom synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset (PNG images, masks and manifest.json).
    GenData(GenDataArgs),
    /// Run the four-phase progressive training schedule.
    Train(TrainArgs),
    /// Synthesize one image from a label PNG.
    Synth(SynthArgs),
    /// Score a checkpoint on a dataset split and write a JSON report.
    Eval(EvalArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration [default: built-in desk settings]
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. --set train.batch_size=8 (repeatable) [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "DIR", help = from_config("Output directory", "paths.data"))]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "N", help = from_config("Number of phantoms", "data.n_samples"))]
    pub n_samples: Option<usize>,
    #[arg(long, value_name = "SEED", help = from_config("Dataset seed", "data.seed"))]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_name = "DIR", help = from_config("Dataset directory", "paths.data"))]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "RUN_DIR", help = from_config("Run directory for log and checkpoints", "paths.run"))]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "SEED", help = from_config("Training seed", "train.seed"))]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N", help = from_config("Minibatch size", "train.batch_size"))]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "E1,E2,E3,E4", value_delimiter = ',',
          help = from_config("Epochs of phases 1 to 4", "train.phase_epochs"))]
    pub phase_epochs: Option<Vec<usize>>,
    #[arg(long, help = from_config("Zero the sketch channel of every label", "train.mask_only"))]
    pub mask_only: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Checkpoint file [required]
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Label PNG: R = ovary, G = follicle, B = sketch (a black B channel is fine) [required]
    #[arg(long, value_name = "PNG")]
    pub label: PathBuf,
    /// Output grayscale PNG [required]
    #[arg(long, value_name = "PNG")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file [required]
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Dataset directory [default: paths.data of the configuration]
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output JSON report [required]
    #[arg(long, value_name = "JSON")]
    pub report: PathBuf,
    /// TOML run configuration [default: the configuration stored in the checkpoint]
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key (repeatable) [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, value_enum, help = from_config("Dataset split to score", "eval.split"))]
    pub split: Option<Split>,
    #[arg(long, value_name = "SEED", help = from_config("Feature extractor seed", "eval.extractor_seed"))]
    pub extractor_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoint file [required]
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// TCP port
    #[arg(long, default_value_t = service::DEFAULT_PORT)]
    pub port: u16,
    /// Bind address
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Allowed CORS origin, `*` for any [default: CORS off]
    #[arg(long, value_name = "ORIGIN")]
    pub allow_origin: Option<String>,
}

/// A failed command, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<pgsgan_core::Error> for Failure {
    fn from(e: pgsgan_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
