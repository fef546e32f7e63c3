//! `train`: runs the configured objective and writes checkpoints plus
//! `metrics.jsonl` into the run directory.

use std::path::{Path, PathBuf};

use polab::policy::Policy;
use polab::trainer::{Checkpoint, Run, StepMetrics, TrainHooks, TrainOutcome};
use polab::LabError;

use crate::commands::data::{self, Dataset};
use crate::config::Resolved;
use crate::error::{CliError, Result};
use crate::io::{create_dir, write_bytes, JsonlWriter};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

/// Writes metrics and checkpoint files, then forwards checkpoints to an
/// optional observer.
type Observer<'a> = Box<dyn FnMut(&Checkpoint) -> polab::Result<()> + 'a>;

pub struct FileHooks<'a> {
    dir: PathBuf,
    metrics: JsonlWriter,
    observer: Option<Observer<'a>>,
}

impl<'a> FileHooks<'a> {
    pub fn new(dir: &Path, resume: bool) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let metrics = if resume { JsonlWriter::append(&path)? } else { JsonlWriter::create(&path)? };
        Ok(Self { dir: dir.to_path_buf(), metrics, observer: None })
    }

    pub fn with_observer(mut self, f: impl FnMut(&Checkpoint) -> polab::Result<()> + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }
}

fn to_lab(e: CliError) -> LabError {
    match e {
        CliError::Io { source, .. } => LabError::Io(source),
        CliError::Json(e) => LabError::Json(e),
        other => LabError::Format(other.to_string()),
    }
}

impl TrainHooks for FileHooks<'_> {
    fn on_step(&mut self, metrics: &StepMetrics) -> polab::Result<()> {
        self.metrics.write(metrics).map_err(to_lab)
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> polab::Result<()> {
        checkpoint.save(&self.dir.join(Checkpoint::file_name(checkpoint.step)))?;
        match self.observer.as_mut() {
            Some(f) => f(checkpoint),
            None => Ok(()),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|source| CliError::CheckpointLoad { path: path.display().to_string(), source })
}

/// Trains into `dir`, which is created if needed.
pub fn train_into(
    cfg: &Resolved,
    data: &Dataset,
    dir: &Path,
    resume: Option<Checkpoint>,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainOutcome> {
    let policy = Policy::new(cfg.policy.clone())?;
    let run = Run {
        policy: &policy,
        config: &cfg.train,
        objective: cfg.objective,
        optim: cfg.optim,
        config_hash: cfg.hash(),
    };
    let mut resolved = serde_json::to_vec_pretty(cfg)?;
    resolved.push(b'\n');
    write_bytes(&dir.join(RESOLVED_CONFIG_FILE), &resolved)?;
    let outcome = if cfg.objective.is_offline() {
        run.train_offline(&data.pairs, resume, hooks)
    } else {
        run.train_online(&data.task, &data.train_prompts, cfg.sampler, resume, hooks)
    };
    outcome.map_err(|e| match e {
        LabError::TrainingAbort { .. } => CliError::Abort(e),
        LabError::Format(_) => CliError::Usage(e.to_string()),
        other => other.into(),
    })
}

pub fn cmd_train(cfg: &Resolved, root: &Path, run_name: Option<&str>, resume: Option<&Path>) -> Result<PathBuf> {
    let data = data::load(cfg, root)?;
    let dir = root.join(run_name.unwrap_or(cfg.objective.name()));
    create_dir(&dir)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let mut hooks = FileHooks::new(&dir, resume.is_some())?;
    let outcome = train_into(cfg, &data, &dir, resume, &mut hooks)?;
    println!(
        "trained {} for {} steps; final checkpoint {}",
        cfg.objective.name(),
        outcome.final_checkpoint.step,
        dir.join(Checkpoint::file_name(outcome.final_checkpoint.step)).display()
    );
    Ok(dir)
}
