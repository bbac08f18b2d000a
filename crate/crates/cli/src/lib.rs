//! The `covidnn` command-line pipeline.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::{ModelKind, RunConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub const THREADS_ENV: &str = "COVIDNN_THREADS";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<covidnn::Error> for Failure {
    fn from(e: covidnn::Error) -> Self {
        use covidnn::Error as E;
        match e {
            E::InvalidArgument(_) | E::InvalidArchitecture(_) => Failure::Usage(e.to_string()),
            E::Diverged { .. } | E::UninitializedStatistics(_) | E::LayerState { .. } => {
                Failure::Numeric(e.to_string())
            }
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "covidnn", version, about = "COVID-19 chest-image CNN pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop, resize and cache every image of a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 224, value_parser = parse_size)]
        size: usize,
    },
    /// Train one model and write weights, curve and run metadata.
    Train(RunArgs),
    /// Evaluate saved weights on one split of a manifest.
    Eval {
        #[command(flatten)]
        target: EvalArgs,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "xray")]
        modality: String,
    },
    /// Print `label,probability` for one image, probability being p(COVID).
    Predict {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Write the ROC curve of saved weights as CSV and print its AUC.
    Roc {
        #[command(flatten)]
        target: EvalArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per seed, then aggregate.
    Multirun(RunArgs),
    /// Finite-difference check of every layer kind.
    Gradcheck {
        #[arg(long, default_value_t = covidnn::gradcheck::DEFAULT_SEEDS)]
        seeds: u64,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// train, val or test; defaults to test when present, else val.
    #[arg(long)]
    pub split: Option<String>,
}

fn parse_size(s: &str) -> Result<usize, String> {
    match s {
        "224" => Ok(224),
        "227" => Ok(227),
        _ => Err(format!("`{s}` is not 224 or 227")),
    }
}

/// Config file plus per-field overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub from_scratch: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub validation_frequency: Option<usize>,
    #[arg(long)]
    pub num_runs: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub freeze_up_to: Option<String>,
}

impl RunArgs {
    /// Loads the config file (if any) and applies every given flag on top.
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => {
                let missing = |f: &str| Failure::Usage(format!("{f}: required without --config"));
                RunConfig {
                    model: self.model.ok_or_else(|| missing("--model"))?,
                    manifest: self.manifest.clone().ok_or_else(|| missing("--manifest"))?,
                    out_dir: self.out_dir.clone().ok_or_else(|| missing("--out-dir"))?,
                    ..serde_json::from_str(r#"{"model": "cnn", "manifest": "", "out_dir": ""}"#)
                        .expect("default config")
                }
            }
        };
        if let Some(v) = self.model {
            cfg.model = v;
        }
        if let Some(v) = &self.manifest {
            cfg.manifest = v.clone();
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.pretrained {
            cfg.pretrained = Some(v.clone());
        }
        if self.from_scratch {
            cfg.from_scratch = true;
        }
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.mini_batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            t.momentum = v;
        }
        if let Some(v) = self.validation_frequency {
            t.validation_frequency_iters = v;
        }
        if let Some(v) = self.num_runs {
            t.num_runs = v;
        }
        if let Some(v) = &self.freeze_up_to {
            t.freeze_up_to = Some(v.clone());
        }
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        if let Some(v) = self.input_size {
            cfg.input_size = Some(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Worker count for parallel sections: `COVIDNN_THREADS` if set, else the
/// available parallelism.
pub fn thread_count() -> Result<usize, Failure> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Failure::Usage(format!("{THREADS_ENV}: `{v}` is not a positive integer"))
            }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match commands::dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {f}");
            f.code()
        }
    }
}
