// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use mvadapter::config::{ConfigError, ModelConfig, RunConfig};
use mvadapter::encoders::ModelState;
use mvadapter::synthdata;
use mvadapter::trainer;

/// Gradient-check failures above this bound exit with status 1.
const GRADCHECK_TOL: f64 = 1e-4;
const PAPER_TUNABLE_PCT: f64 = 2.56;

#[derive(Parser)]
#[command(name = "mvadapter", version, about = "Parameter-efficient video-text retrieval adapters at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the `data.*` keys of a config file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adapters and write an adapter-only checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the step log to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Recall of a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Parameter counts by group.
    Params {
        #[arg(long, required_unless_present = "clip_b16")]
        config: Option<PathBuf>,
        /// Report CLIP ViT-B/16 dimensions instead of a config file.
        #[arg(long, conflicts_with = "config")]
        clip_b16: bool,
    },
    /// Storage units of one shared backbone plus per-task adapters.
    Storage {
        #[arg(long)]
        tasks: usize,
        #[arg(long, default_value_t = 0.0)]
        ratio: f64,
        /// Report full fine-tuning (one model copy per task) instead.
        #[arg(long)]
        full: bool,
    },
    /// Central-difference check of every tunable gradient on a batch of two.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("no such file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("config error at `{key}`: {source}")]
    Config { key: String, source: ConfigError },
    #[error("gradient check failed: max relative error {0:e}")]
    Gradcheck(f64),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::MissingFile(_) => 2,
            Self::Config { .. } => 3,
            Self::Gradcheck(_) | Self::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(source: ConfigError) -> Self {
        let key = source.key().unwrap_or("<syntax>").to_string();
        Self::Config { key, source }
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    require(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::parse(&text)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::GenData { spec, out: path } => {
            let run = read_config(Some(&spec))?;
            let ds = synthdata::generate(&run.data).context("generating dataset")?;
            synthdata::save(&ds, &path).with_context(|| format!("writing {}", path.display()))?;
            writeln!(out, "pairs {} train {} test {}", ds.samples.len(), ds.train().len(), ds.test().len()).ok();
        }
        Command::Train { config, data, out: path, log } => {
            let run = read_config(Some(&config))?;
            require(&data)?;
            let ds = synthdata::load(&data).with_context(|| format!("loading {}", data.display()))?;
            let mut state = ModelState::new(run.model.clone(), run.train.seed, run.train.tau_init);
            let mut log_file = match &log {
                Some(p) => Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => None,
            };
            trainer::train(&mut state, ds.train(), &run.train, |entry| {
                writeln!(out, "{entry}").ok();
                if let Some(f) = log_file.as_mut() {
                    writeln!(f, "{entry}").ok();
                }
            })
            .context("training")?;
            trainer::save_checkpoint(&state, &path).with_context(|| format!("writing {}", path.display()))?;
        }
        Command::Eval { ckpt, data } => {
            require(&ckpt)?;
            require(&data)?;
            let state = trainer::load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let ds = synthdata::load(&data).with_context(|| format!("loading {}", data.display()))?;
            let (t2v, v2t) = trainer::evaluate(&state, ds.test()).context("evaluating")?;
            writeln!(out, "{t2v}\n{v2t}").ok();
        }
        Command::Params { config, clip_b16 } => {
            let model = if clip_b16 {
                ModelConfig::clip_b16()
            } else {
                read_config(config.as_deref())?.model
            };
            let report = trainer::count_params(&model);
            writeln!(out, "{report}").ok();
            if clip_b16 {
                for line in report.gap_lines(PAPER_TUNABLE_PCT) {
                    writeln!(out, "{line}").ok();
                }
            }
        }
        Command::Storage { tasks, ratio, full } => {
            let units = if full {
                trainer::full_finetune_units(tasks)
            } else {
                trainer::storage_units(tasks, ratio).context("storage")?
            };
            writeln!(out, "{units:?}").ok();
        }
        Command::Gradcheck { config, eps } => {
            let run = read_config(config.as_deref())?;
            let report = trainer::gradcheck(&run, eps).context("gradient check")?;
            let worst = report.worst.as_ref().map_or("-".to_string(), |(p, i)| format!("{p}[{i}]"));
            writeln!(out, "max_rel_err {:e} checked {} worst {worst}", report.max_rel_err, report.checked).ok();
            if !(report.max_rel_err < GRADCHECK_TOL) {
                return Err(CliError::Gradcheck(report.max_rel_err));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
