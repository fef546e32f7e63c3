//! Experiment configuration: a schema-versioned TOML file, with dotted
//! `section.field=value` overrides applied before validation.

use std::path::{Path, PathBuf};

use polab::objectives::ObjectiveId;
use polab::policy::{PolicyKind, PolicySpec, SamplerConfig};
use polab::synth::{AdvantageConfig, TaskSpec};
use polab::trainer::{LrSchedule, ObjectiveSpec, OptimizerConfig, OptimizerKind, TrainConfig};
use polab::variants::{CppoTarget, ScheduleSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub task: TaskSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub sampler: SamplerSection,
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub probe: ProbeSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub seed: u64,
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub resp_len: usize,
    pub feature_dim: usize,
    pub n_train_prompts: usize,
    pub n_eval_prompts: usize,
    /// Fraction of evaluation prompts shared with the training prompts.
    pub eval_overlap: f64,
    /// Std of the behaviour policy that samples the offline pairs.
    pub behaviour_scale: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 8,
            prompt_len: 3,
            resp_len: 4,
            feature_dim: 4,
            n_train_prompts: 256,
            n_eval_prompts: 64,
            eval_overlap: 0.0,
            behaviour_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub kind: PolicyKind,
    pub context_len: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { kind: PolicyKind::LinearSoftmax, context_len: 2, embed_dim: 4, seed: 0, init_scale: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub temperature: f64,
    pub top_p: f64,
    /// Defaults to `task.resp_len`.
    pub max_len: Option<usize>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 1.0, max_len: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    pub id: String,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
}

fn default_beta() -> f64 {
    polab::objectives::DEFAULT_BETA
}

fn default_epsilon() -> f64 {
    polab::objectives::DEFAULT_EPSILON
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub kind: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    /// Defaults: linear warmup/decay offline, constant online.
    pub schedule: Option<LrSchedule>,
    pub warmup_ratio: Option<f64>,
    pub clip_norm: Option<f64>,
    /// Set false to disable gradient-norm clipping.
    pub clip: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub sft_steps: u64,
    pub sft_lr: f64,
    pub ppo_epochs: u64,
    pub old_refresh: u64,
    pub gamma: f64,
    pub whiten: bool,
    pub log_wall_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            steps: t.steps,
            batch_size: t.batch_size,
            checkpoint_every: t.checkpoint_every,
            sft_steps: t.sft_steps,
            sft_lr: t.sft_lr,
            ppo_epochs: t.ppo_epochs,
            old_refresh: t.old_refresh,
            gamma: t.advantage.gamma,
            whiten: t.advantage.whiten,
            log_wall_time: t.log_wall_time,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub suite: Vec<String>,
    pub samples: usize,
    /// Defaults to 4 for preference objectives and 6 for rollout objectives.
    pub batch_size: Option<usize>,
    pub iqr: bool,
    /// Probe every n-th checkpoint.
    pub every: usize,
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            suite: ObjectiveId::ALL.iter().map(|id| id.as_str().to_string()).collect(),
            samples: polab::probe::DEFAULT_PROBE_SAMPLES,
            batch_size: None,
            iqr: true,
            every: 1,
            seed: 0,
        }
    }
}

/// Validated, fully defaulted settings.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub task: TaskSpec,
    pub n_train_prompts: usize,
    pub n_eval_prompts: usize,
    pub eval_overlap: f64,
    pub behaviour_scale: f64,
    pub policy: PolicySpec,
    pub sampler: SamplerConfig,
    pub objective: ObjectiveSpec,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub probe: ProbeSettings,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeSettings {
    pub suite: Vec<ObjectiveId>,
    pub samples: usize,
    pub batch_size: usize,
    pub iqr: bool,
    pub every: usize,
    pub seed: u64,
}

impl Resolved {
    /// Hex SHA-256 of the canonical JSON form; recorded in manifests and
    /// checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("resolved config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Hash of the fields that determine the generated datasets.
    pub fn data_hash(&self) -> String {
        let json = serde_json::to_vec(&(
            &self.task,
            self.n_train_prompts,
            self.n_eval_prompts,
            self.eval_overlap,
            self.behaviour_scale,
            &self.policy,
            &self.sampler,
        ))
        .expect("data config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn positive(field: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::config(field, format!("must be > 0, got {v}")))
    }
}

fn at_least(field: &str, v: usize, min: usize) -> Result<usize> {
    if v >= min {
        Ok(v)
    } else {
        Err(CliError::config(field, format!("must be >= {min}, got {v}")))
    }
}

fn unit_interval(field: &str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::config(field, format!("must lie in [0, 1], got {v}")))
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applying `section.field=value` overrides first.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            CliError::config("config", e.message().to_string())
        })?;
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let config: ExperimentConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config("config", e.message().to_string()))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", config.schema_version),
            ));
        }
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, overrides)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let t = &self.task;
        let task = TaskSpec {
            seed: t.seed,
            vocab_size: at_least("task.vocab_size", t.vocab_size, 2)?,
            prompt_len: at_least("task.prompt_len", t.prompt_len, 1)?,
            resp_len: at_least("task.resp_len", t.resp_len, 1)?,
            feature_dim: at_least("task.feature_dim", t.feature_dim, 1)?,
        };
        at_least("task.n_train_prompts", t.n_train_prompts, 1)?;
        at_least("task.n_eval_prompts", t.n_eval_prompts, 1)?;
        unit_interval("task.eval_overlap", t.eval_overlap)?;
        positive("task.behaviour_scale", t.behaviour_scale)?;

        let p = &self.policy;
        at_least("policy.context_len", p.context_len, 1)?;
        at_least("policy.embed_dim", p.embed_dim, 1)?;
        if !(p.init_scale >= 0.0 && p.init_scale.is_finite()) {
            return Err(CliError::config("policy.init_scale", "must be a finite value >= 0"));
        }
        let policy = PolicySpec {
            kind: p.kind,
            vocab_size: task.vocab_size,
            context_len: p.context_len,
            embed_dim: p.embed_dim,
            seed: p.seed,
        };
        policy.validate().map_err(|e| CliError::config("policy", e.to_string()))?;

        let s = &self.sampler;
        let sampler = SamplerConfig {
            temperature: positive("sampler.temperature", s.temperature)?,
            top_p: s.top_p,
            max_len: at_least("sampler.max_len", s.max_len.unwrap_or(task.resp_len), 1)?,
        };
        if !(sampler.top_p > 0.0 && sampler.top_p <= 1.0) {
            return Err(CliError::config("sampler.top_p", format!("must lie in (0, 1], got {}", s.top_p)));
        }

        let objective = self.objective.resolve()?;
        let offline = objective.is_offline();

        let tr = &self.train;
        let train = TrainConfig {
            seed: tr.seed,
            steps: at_least("train.steps", tr.steps as usize, 1)? as u64,
            batch_size: at_least("train.batch_size", tr.batch_size, 1)?,
            checkpoint_every: at_least("train.checkpoint_every", tr.checkpoint_every as usize, 1)? as u64,
            init_scale: p.init_scale,
            sft_steps: tr.sft_steps,
            sft_lr: positive("train.sft_lr", tr.sft_lr)?,
            ppo_epochs: at_least("train.ppo_epochs", tr.ppo_epochs as usize, 1)? as u64,
            old_refresh: at_least("train.old_refresh", tr.old_refresh as usize, 1)? as u64,
            advantage: AdvantageConfig { gamma: tr.gamma, whiten: tr.whiten },
            log_wall_time: tr.log_wall_time,
        };
        if !(tr.gamma > 0.0 && tr.gamma <= 1.0) {
            return Err(CliError::config("train.gamma", format!("must lie in (0, 1], got {}", tr.gamma)));
        }
        if offline && train.batch_size > t.n_train_prompts {
            return Err(CliError::config(
                "train.batch_size",
                format!("exceeds task.n_train_prompts ({})", t.n_train_prompts),
            ));
        }
        if !offline && objective_needs_partition(&objective) && train.batch_size < 3 {
            return Err(CliError::config("train.batch_size", "tertile variants need at least 3 tokens per batch"));
        }

        let optim = self.optim.resolve(offline)?;

        let pr = &self.probe;
        let suite = pr
            .suite
            .iter()
            .map(|s| ObjectiveId::parse(s).map_err(|e| CliError::config("probe.suite", e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if suite.is_empty() {
            return Err(CliError::config("probe.suite", "must list at least one component"));
        }
        let default_batch = if offline {
            polab::probe::DEFAULT_DPO_PROBE_BATCH
        } else {
            polab::probe::DEFAULT_PPO_PROBE_BATCH
        };
        let probe = ProbeSettings {
            suite,
            samples: at_least("probe.samples", pr.samples, 3)?,
            batch_size: at_least("probe.batch_size", pr.batch_size.unwrap_or(default_batch), 1)?,
            iqr: pr.iqr,
            every: at_least("probe.every", pr.every, 1)?,
            seed: pr.seed,
        };

        Ok(Resolved {
            task,
            n_train_prompts: t.n_train_prompts,
            n_eval_prompts: t.n_eval_prompts,
            eval_overlap: t.eval_overlap,
            behaviour_scale: t.behaviour_scale,
            policy,
            sampler,
            objective,
            optim,
            train,
            probe,
        })
    }
}

fn objective_needs_partition(objective: &ObjectiveSpec) -> bool {
    matches!(objective, ObjectiveSpec::Cppo { .. })
}

impl ObjectiveSection {
    pub fn resolve(&self) -> Result<ObjectiveSpec> {
        let beta = positive("objective.beta", self.beta)?;
        let epsilon = positive("objective.epsilon", self.epsilon)?;
        let schedule = |default: Option<ScheduleSpec>| -> Result<ScheduleSpec> {
            let s = self
                .schedule
                .or(default)
                .ok_or_else(|| CliError::config("objective.schedule", "required for this objective"))?;
            s.validate().map_err(|e| CliError::config("objective.schedule", e.to_string()))?;
            Ok(s)
        };
        let spec = match self.id.as_str() {
            "dpo" => ObjectiveSpec::Dpo { beta },
            "cdpo" => {
                let s = schedule(None)?;
                if !matches!(s, ScheduleSpec::CdpoRamp { .. } | ScheduleSpec::Constant { .. }) {
                    return Err(CliError::config("objective.schedule", "cdpo takes a cdpo_ramp or constant schedule"));
                }
                ObjectiveSpec::Cdpo { beta, schedule: s }
            }
            "ppo" => ObjectiveSpec::Ppo { epsilon },
            "cppo" => {
                let lambda = unit_interval("objective.lambda", self.lambda.unwrap_or(1.0))?;
                let target = match self.target.as_deref().unwrap_or("top") {
                    "top" => CppoTarget::Top,
                    "mid" => CppoTarget::Mid,
                    other => {
                        return Err(CliError::config("objective.target", format!("expected top or mid, got {other:?}")))
                    }
                };
                ObjectiveSpec::Cppo { epsilon, lambda, target }
            }
            "hppo" => {
                let s = schedule(Some(ScheduleSpec::HppoSine { t3: 2, tau: 0.08 }))?;
                if !matches!(s, ScheduleSpec::HppoSine { .. } | ScheduleSpec::Constant { .. }) {
                    return Err(CliError::config("objective.schedule", "hppo takes an hppo_sine or constant schedule"));
                }
                ObjectiveSpec::Hppo { epsilon, schedule: s }
            }
            other => {
                return Err(CliError::config(
                    "objective.id",
                    format!("unknown objective {other:?}; expected dpo, cdpo, ppo, cppo or hppo"),
                ))
            }
        };
        Ok(spec)
    }
}

impl OptimSection {
    fn resolve(&self, offline: bool) -> Result<OptimizerConfig> {
        let d = OptimizerConfig::default();
        let cfg = OptimizerConfig {
            kind: self.kind.unwrap_or(d.kind),
            lr: positive("optim.lr", self.lr.unwrap_or(d.lr))?,
            weight_decay: self.weight_decay.unwrap_or(if offline { d.weight_decay } else { 0.0 }),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            eps: self.eps.unwrap_or(d.eps),
            schedule: self
                .schedule
                .unwrap_or(if offline { LrSchedule::LinearWarmupDecay } else { LrSchedule::Constant }),
            warmup_ratio: self.warmup_ratio.unwrap_or(d.warmup_ratio),
            clip_norm: match self.clip {
                Some(false) => None,
                _ => Some(positive("optim.clip_norm", self.clip_norm.unwrap_or(1.0))?),
            },
        };
        if cfg.weight_decay < 0.0 {
            return Err(CliError::config("optim.weight_decay", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&cfg.warmup_ratio) {
            return Err(CliError::config("optim.warmup_ratio", "must lie in [0, 1)"));
        }
        cfg.validate().map_err(|e| CliError::config("optim", e.to_string()))?;
        Ok(cfg)
    }
}

/// Sets `path = value` inside `table`. The value is read as a TOML literal
/// when it parses as one, otherwise as a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {item:?} is not of the form section.field=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cursor = table;
    for key in parents {
        let entry = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(path, format!("{key} is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        schema_version = 1
        [task]
        vocab_size = 6
        [objective]
        id = "dpo"
    "#;

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let r = ExperimentConfig::parse(MINIMAL, &[]).unwrap().resolve().unwrap();
        assert_eq!(r.objective, ObjectiveSpec::Dpo { beta: 0.1 });
        assert_eq!(r.optim.schedule, LrSchedule::LinearWarmupDecay);
        assert_eq!(r.probe.batch_size, 4);
        assert_eq!(r.sampler.max_len, 4);
    }

    #[test]
    fn overrides_and_field_paths() {
        let c = ExperimentConfig::parse(MINIMAL, &["objective.id=ppo".into(), "train.steps=7".into()]).unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(r.train.steps, 7);
        assert_eq!(r.optim.schedule, LrSchedule::Constant);
        assert_eq!(r.probe.batch_size, 6);

        let bad = ExperimentConfig::parse(MINIMAL, &["task.vocab_size=1".into()]).unwrap().resolve();
        match bad {
            Err(CliError::Config { field, .. }) => assert_eq!(field, "task.vocab_size"),
            other => panic!("{other:?}"),
        }
        let bad = ExperimentConfig::parse(MINIMAL, &["objective.id=sft".into()]).unwrap().resolve();
        assert!(matches!(bad, Err(CliError::Config { field, .. }) if field == "objective.id"));
        assert!(ExperimentConfig::parse(MINIMAL, &["task.vocab_sise=4".into()]).is_err());
        assert!(ExperimentConfig::parse(&MINIMAL.replace("= 1", "= 2"), &[]).is_err());
    }

    #[test]
    fn schedules_parse_from_tables() {
        let text = format!("{MINIMAL}\nschedule = {{ kind = \"cdpo_ramp\", t1 = 10, t2 = 20 }}\n");
        let r = ExperimentConfig::parse(&text, &["objective.id=cdpo".into()]).unwrap().resolve().unwrap();
        assert_eq!(
            r.objective,
            ObjectiveSpec::Cdpo { beta: 0.1, schedule: ScheduleSpec::CdpoRamp { t1: 10, t2: 20 } }
        );
        let missing = ExperimentConfig::parse(MINIMAL, &["objective.id=cdpo".into()]).unwrap().resolve();
        assert!(matches!(missing, Err(CliError::Config { field, .. }) if field == "objective.schedule"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::parse(MINIMAL, &[]).unwrap().resolve().unwrap();
        let b = ExperimentConfig::parse(MINIMAL, &["train.seed=1".into()]).unwrap().resolve().unwrap();
        assert_eq!(a.hash(), ExperimentConfig::parse(MINIMAL, &[]).unwrap().resolve().unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.data_hash(), b.data_hash());
    }
}
