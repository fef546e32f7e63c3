//! Command-line driver for the preference-optimisation lab: dataset
//! generation, training, alignment probes, ablations and reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use polab::objectives::ObjectiveId;

use crate::config::ExperimentConfig;
pub use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "polab", version, about = "Preference-optimisation dynamics on toy softmax policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config field, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "FIELD=VALUE")]
    pub set: Vec<String>,
    /// Output root; overrides `output_dir` from the config.
    #[arg(long, env = "POLAB_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate preference pairs and prompt sets.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the configured objective.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory name under the output root (default: objective id).
        #[arg(long)]
        run_name: Option<String>,
        /// Resume from this checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Gradient-alignment probes over a checkpoint series.
    Probe {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint glob (default: <out>/<objective>/ckpt_*.bin).
        #[arg(long)]
        checkpoints: Option<String>,
        /// Comma-separated components, e.g. TOT,POS,NEG.
        #[arg(long)]
        suite: Option<String>,
        /// Trace output path (default: trace.jsonl in the run directory).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// CSV tables and SVG plots from trace files.
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a matrix of objective variants with shared seeds. Output goes to
    /// <out>/ablate/<matrix file stem>/.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        matrix: PathBuf,
    },
}

fn load(common: &CommonArgs, extra: Vec<String>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut overrides = common.set.clone();
    overrides.extend(extra);
    let cfg = ExperimentConfig::load(&common.config, &overrides)?;
    let root = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, root))
}

fn parse_suite(s: &str) -> Result<Vec<ObjectiveId>> {
    s.split(',')
        .map(|p| ObjectiveId::parse(p.trim()).map_err(|e| CliError::config("suite", e.to_string())))
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let (cfg, root) = load(&common, Vec::new())?;
            let manifest = commands::data::gen_data(&cfg.resolve()?, &root)?;
            println!("wrote {} files to {}", manifest.files.len(), commands::data::data_dir(&root).display());
        }
        Command::Train { common, objective, steps, seed, run_name, resume } => {
            let mut extra = Vec::new();
            if let Some(id) = objective {
                extra.push(format!("objective.id={}", toml_string(&id)));
            }
            if let Some(s) = steps {
                extra.push(format!("train.steps={s}"));
            }
            if let Some(s) = seed {
                extra.push(format!("train.seed={s}"));
            }
            let (cfg, root) = load(&common, extra)?;
            commands::train::cmd_train(&cfg.resolve()?, &root, run_name.as_deref(), resume.as_deref())?;
        }
        Command::Probe { common, checkpoints, suite, trace } => {
            let (cfg, root) = load(&common, Vec::new())?;
            let resolved = cfg.resolve()?;
            let suite = match suite {
                Some(s) => parse_suite(&s)?,
                None => resolved.probe.suite.clone(),
            };
            commands::probe::cmd_probe(&resolved, &root, checkpoints.as_deref(), &suite, trace.as_deref())?;
        }
        Command::Report { traces, out_dir } => {
            commands::report::cmd_report(&traces, &out_dir)?;
        }
        Command::Ablate { common, matrix } => {
            let (cfg, root) = load(&common, Vec::new())?;
            let label = matrix.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let matrix = commands::ablate::Matrix::load(&matrix)?;
            commands::ablate::cmd_ablate(&cfg, &root, &label, &matrix)?;
        }
    }
    Ok(())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli)
}
