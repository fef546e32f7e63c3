//! Offline (DPO family) and online (PPO family) training loops.
//!
//! All randomness after initialisation comes from a single ChaCha stream
//! seeded by `TrainConfig::seed`, so a run resumed from a checkpoint replays
//! the uninterrupted run exactly.

pub mod checkpoint;
pub mod optim;

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::objectives::{
    dpo_loss, ppo_loss, Evaluated, PreferencePair, RunningBaseline, DEFAULT_BETA, DEFAULT_EPSILON,
};
use crate::policy::{GradVector, ParamVector, Policy, SamplerConfig, TokenSequence};
use crate::synth::{gen_rollouts, AdvantageConfig, Sampler, SyntheticTask};
use crate::variants::{cdpo_loss, cppo_loss, hppo_loss, CppoTarget, ScheduleSpec};

pub use checkpoint::{Checkpoint, RngState};
pub use optim::{clip_grad_norm, lr_at, LrSchedule, OptimizerConfig, OptimizerKind, OptimizerState};

/// Training objective with its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "lowercase")]
pub enum ObjectiveSpec {
    Dpo { beta: f64 },
    Cdpo { beta: f64, schedule: ScheduleSpec },
    Ppo { epsilon: f64 },
    Cppo { epsilon: f64, lambda: f64, target: CppoTarget },
    Hppo { epsilon: f64, schedule: ScheduleSpec },
}

impl ObjectiveSpec {
    pub fn dpo() -> Self {
        ObjectiveSpec::Dpo { beta: DEFAULT_BETA }
    }

    pub fn ppo() -> Self {
        ObjectiveSpec::Ppo { epsilon: DEFAULT_EPSILON }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveSpec::Dpo { .. } => "dpo",
            ObjectiveSpec::Cdpo { .. } => "cdpo",
            ObjectiveSpec::Ppo { .. } => "ppo",
            ObjectiveSpec::Cppo { .. } => "cppo",
            ObjectiveSpec::Hppo { .. } => "hppo",
        }
    }

    pub fn is_offline(&self) -> bool {
        matches!(self, ObjectiveSpec::Dpo { .. } | ObjectiveSpec::Cdpo { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LabError::Domain(format!("{name} must be > 0, got {v}")))
            }
        };
        match *self {
            ObjectiveSpec::Dpo { beta } => positive("beta", beta),
            ObjectiveSpec::Cdpo { beta, schedule } => {
                positive("beta", beta)?;
                schedule.validate()
            }
            ObjectiveSpec::Ppo { epsilon } => positive("epsilon", epsilon),
            ObjectiveSpec::Cppo { epsilon, lambda, .. } => {
                positive("epsilon", epsilon)?;
                ScheduleSpec::Constant { value: lambda }.validate()
            }
            ObjectiveSpec::Hppo { epsilon, schedule } => {
                positive("epsilon", epsilon)?;
                schedule.validate()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Offline: optimizer steps. Online: outer iterations.
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    /// Std of the initial parameter draw.
    pub init_scale: f64,
    /// Supervised warm start on chosen responses before preference training.
    pub sft_steps: u64,
    pub sft_lr: f64,
    /// Optimizer steps per batch of rollouts.
    pub ppo_epochs: u64,
    /// The old policy is refreshed every this many outer iterations.
    pub old_refresh: u64,
    pub advantage: AdvantageConfig,
    /// Record elapsed milliseconds in metrics; off keeps logs reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 200,
            batch_size: 16,
            checkpoint_every: 20,
            init_scale: 0.1,
            sft_steps: 0,
            sft_lr: 5e-2,
            ppo_epochs: 1,
            old_refresh: 1,
            advantage: AdvantageConfig::default(),
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(LabError::Domain("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(LabError::Domain("batch_size must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(LabError::Domain("checkpoint_every must be >= 1".into()));
        }
        if self.ppo_epochs == 0 || self.old_refresh == 0 {
            return Err(LabError::Domain("ppo_epochs and old_refresh must be >= 1".into()));
        }
        if !(self.init_scale >= 0.0) || !(self.sft_lr > 0.0) {
            return Err(LabError::Domain("init_scale must be >= 0 and sft_lr > 0".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub grad_norm_pre_clip: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
}

/// Observer for the training loops. Errors abort training.
pub trait TrainHooks {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Keeps everything in memory; handy for tests and small runs.
#[derive(Default)]
pub struct Recorder {
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainHooks for Recorder {
    fn on_step(&mut self, metrics: &StepMetrics) -> Result<()> {
        self.metrics.push(metrics.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        self.checkpoints.push(checkpoint.clone());
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub final_checkpoint: Checkpoint,
}

/// Training environment shared by both loops.
pub struct Run<'a> {
    pub policy: &'a Policy,
    pub config: &'a TrainConfig,
    pub objective: ObjectiveSpec,
    pub optim: OptimizerConfig,
    /// Recorded in checkpoints so resumes can detect config drift.
    pub config_hash: String,
}

fn abort(step: u64, reason: impl Into<String>) -> LabError {
    LabError::TrainingAbort { step, reason: reason.into() }
}

fn check_finite(step: u64, eval: &Evaluated) -> Result<()> {
    if !eval.value.is_finite() {
        return Err(abort(step, format!("non-finite loss {}", eval.value)));
    }
    if !eval.grad.is_finite() {
        return Err(abort(step, "non-finite gradient"));
    }
    Ok(())
}

fn rng_state(seed: u64, rng: &ChaCha8Rng) -> RngState {
    RngState { seed, word_pos: rng.get_word_pos() }
}

fn restore_rng(state: RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
    rng.set_word_pos(state.word_pos);
    rng
}

/// Clips, schedules and applies one update. Returns (pre-clip norm, lr).
fn apply_update(
    opt: &mut OptimizerState,
    params: &mut ParamVector,
    mut grad: GradVector,
    step: u64,
    total: u64,
) -> Result<(f64, f64)> {
    let cfg = opt.config;
    let norm = match cfg.clip_norm {
        Some(max) => clip_grad_norm(&mut grad, max),
        None => grad.norm(),
    };
    let lr = lr_at(step, total, cfg.schedule, cfg.warmup_ratio, cfg.lr);
    opt.step(params, &grad, lr).map_err(|e| abort(step, e.to_string()))?;
    Ok((norm, lr))
}

fn elapsed_ms(start: &Instant, enabled: bool) -> u64 {
    if enabled {
        start.elapsed().as_millis() as u64
    } else {
        0
    }
}

/// Mean negative log-likelihood of the chosen responses.
pub fn sft_loss(policy: &Policy, params: &ParamVector, pairs: &[PreferencePair]) -> Result<Evaluated> {
    if pairs.is_empty() {
        return Err(LabError::Domain("empty batch".into()));
    }
    let n = pairs.len() as f64;
    let mut grad = params.zeros_grad();
    let mut value = 0.0;
    for p in pairs {
        value -= policy.log_prob(params, &p.x, &p.y_plus)?;
        policy.accumulate_grad(params, &p.x, &p.y_plus, -1.0 / n, &mut grad)?;
    }
    Ok(Evaluated { value: value / n, grad })
}

/// Full-batch Adam on the chosen responses at a constant rate.
pub fn sft_warm_start(
    policy: &Policy,
    params: &mut ParamVector,
    pairs: &[PreferencePair],
    steps: u64,
    lr: f64,
) -> Result<()> {
    let cfg = OptimizerConfig {
        weight_decay: 0.0,
        schedule: LrSchedule::Constant,
        lr,
        ..OptimizerConfig::default()
    };
    let mut opt = OptimizerState::new(cfg, params.len());
    for step in 0..steps {
        let eval = sft_loss(policy, params, pairs)?;
        check_finite(step, &eval)?;
        apply_update(&mut opt, params, eval.grad, step, steps)?;
    }
    Ok(())
}

impl Run<'_> {
    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.objective.validate()?;
        self.optim.validate()
    }

    fn check_resume(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.policy != *self.policy.spec() {
            return Err(LabError::Format("checkpoint policy does not match the run".into()));
        }
        if ckpt.objective != self.objective.name() {
            return Err(LabError::Format(format!(
                "checkpoint objective {} does not match {}",
                ckpt.objective,
                self.objective.name()
            )));
        }
        if ckpt.config_hash != self.config_hash {
            return Err(LabError::Format("checkpoint was written under a different config".into()));
        }
        Ok(())
    }

    /// DPO or cDPO on a fixed preference dataset.
    pub fn train_offline(
        &self,
        pairs: &[PreferencePair],
        resume: Option<Checkpoint>,
        hooks: &mut dyn TrainHooks,
    ) -> Result<TrainOutcome> {
        self.validate()?;
        if !self.objective.is_offline() {
            return Err(LabError::Contract(format!("{} is not an offline objective", self.objective.name())));
        }
        if pairs.len() < self.config.batch_size {
            return Err(LabError::Domain(format!(
                "{} pairs cannot fill a batch of {}",
                pairs.len(),
                self.config.batch_size
            )));
        }
        let cfg = self.config;
        let total = cfg.steps;
        let (mut params, ref_params, mut opt, mut rng, start) = match resume {
            Some(ckpt) => {
                self.check_resume(&ckpt)?;
                let ref_params = ckpt
                    .section_params("ref")?
                    .ok_or_else(|| LabError::Format("checkpoint lacks reference parameters".into()))?;
                let rng = restore_rng(ckpt.rng);
                (ckpt.params, ref_params, ckpt.optimizer, rng, ckpt.step)
            }
            None => {
                let mut params = self.policy.init_params(cfg.init_scale);
                sft_warm_start(self.policy, &mut params, pairs, cfg.sft_steps, cfg.sft_lr)?;
                let opt = OptimizerState::new(self.optim, params.len());
                (params.clone(), params, opt, ChaCha8Rng::seed_from_u64(cfg.seed), 0)
            }
        };

        let snapshot = |step: u64, params: &ParamVector, opt: &OptimizerState, rng: &ChaCha8Rng| Checkpoint {
            step,
            iteration: step,
            objective: self.objective.name().into(),
            policy: self.policy.spec().clone(),
            params: params.clone(),
            optimizer: opt.clone(),
            rng: rng_state(cfg.seed, rng),
            config_hash: self.config_hash.clone(),
            sections: vec![("ref".into(), ref_params.values().to_vec())],
        };
        if start == 0 {
            hooks.on_checkpoint(&snapshot(0, &params, &opt, &rng))?;
        }

        let clock = Instant::now();
        for step in start..total {
            let batch: Vec<PreferencePair> = sample_indices(&mut rng, pairs.len(), cfg.batch_size)
                .into_iter()
                .map(|i| pairs[i].clone())
                .collect();
            let (eval, lambda) = match self.objective {
                ObjectiveSpec::Dpo { beta } => (dpo_loss(self.policy, &params, &ref_params, &batch, beta), None),
                ObjectiveSpec::Cdpo { beta, schedule } => {
                    let lambda = schedule.lambda_at(step);
                    (cdpo_loss(self.policy, &params, &ref_params, &batch, beta, lambda), Some(lambda))
                }
                _ => unreachable!("checked above"),
            };
            let eval = eval.map_err(|e| abort(step, e.to_string()))?;
            check_finite(step, &eval)?;
            let (norm, lr) = apply_update(&mut opt, &mut params, eval.grad, step, total)?;
            hooks.on_step(&StepMetrics {
                step,
                loss: eval.value,
                grad_norm_pre_clip: norm,
                lr,
                lambda,
                wall_ms: elapsed_ms(&clock, cfg.log_wall_time),
                mean_reward: None,
            })?;
            let done = step + 1;
            if done % cfg.checkpoint_every == 0 || done == total {
                hooks.on_checkpoint(&snapshot(done, &params, &opt, &rng))?;
            }
        }
        let final_checkpoint = snapshot(total.max(start), &params, &opt, &rng);
        Ok(TrainOutcome { params, final_checkpoint })
    }

    /// PPO, cPPO or hPPO against the synthetic reward.
    pub fn train_online(
        &self,
        task: &SyntheticTask,
        prompts: &[TokenSequence],
        sampler: SamplerConfig,
        resume: Option<Checkpoint>,
        hooks: &mut dyn TrainHooks,
    ) -> Result<TrainOutcome> {
        self.validate()?;
        if self.objective.is_offline() {
            return Err(LabError::Contract(format!("{} is not an online objective", self.objective.name())));
        }
        if prompts.len() < self.config.batch_size {
            return Err(LabError::Domain(format!(
                "{} prompts cannot fill a batch of {}",
                prompts.len(),
                self.config.batch_size
            )));
        }
        crate::policy::validate_sampler(&sampler)?;
        let cfg = self.config;
        let total_steps = cfg.steps * cfg.ppo_epochs;
        let (mut params, mut old, mut baseline, mut opt, mut rng, start) = match resume {
            Some(ckpt) => {
                self.check_resume(&ckpt)?;
                let old = ckpt
                    .section_params("old")?
                    .ok_or_else(|| LabError::Format("checkpoint lacks old-policy parameters".into()))?;
                let baseline = RunningBaseline {
                    sums: ckpt.section("baseline_sums").unwrap_or_default().to_vec(),
                    counts: ckpt
                        .section("baseline_counts")
                        .unwrap_or_default()
                        .iter()
                        .map(|&c| c as u64)
                        .collect(),
                };
                let rng = restore_rng(ckpt.rng);
                (ckpt.params, old, baseline, ckpt.optimizer, rng, ckpt.iteration)
            }
            None => {
                let params = self.policy.init_params(cfg.init_scale);
                let opt = OptimizerState::new(self.optim, params.len());
                let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                (params.clone(), params, RunningBaseline::default(), opt, rng, 0)
            }
        };

        let snapshot = |iteration: u64,
                        params: &ParamVector,
                        old: &ParamVector,
                        baseline: &RunningBaseline,
                        opt: &OptimizerState,
                        rng: &ChaCha8Rng| Checkpoint {
            step: iteration * cfg.ppo_epochs,
            iteration,
            objective: self.objective.name().into(),
            policy: self.policy.spec().clone(),
            params: params.clone(),
            optimizer: opt.clone(),
            rng: rng_state(cfg.seed, rng),
            config_hash: self.config_hash.clone(),
            sections: vec![
                ("old".into(), old.values().to_vec()),
                ("baseline_sums".into(), baseline.sums.clone()),
                ("baseline_counts".into(), baseline.counts.iter().map(|&c| c as f64).collect()),
            ],
        };
        if start == 0 {
            hooks.on_checkpoint(&snapshot(0, &params, &old, &baseline, &opt, &rng))?;
        }

        let clock = Instant::now();
        for iteration in start..cfg.steps {
            let step0 = iteration * cfg.ppo_epochs;
            if iteration % cfg.old_refresh == 0 {
                old = params.clone();
            }
            let batch: Vec<TokenSequence> = sample_indices(&mut rng, prompts.len(), cfg.batch_size)
                .into_iter()
                .map(|i| prompts[i].clone())
                .collect();
            let rollout_seed: u64 = rng.gen();
            let behaviour = Sampler { policy: self.policy, params: &old, config: sampler };
            let rollouts = gen_rollouts(task, &batch, behaviour, rollout_seed, cfg.advantage, Some(&mut baseline))
                .map_err(|e| abort(step0, e.to_string()))?;
            let mean_reward =
                rollouts.iter().map(|r| r.rewards.iter().sum::<f64>()).sum::<f64>() / rollouts.len() as f64;

            for epoch in 0..cfg.ppo_epochs {
                let step = step0 + epoch;
                let (eval, lambda) = match self.objective {
                    ObjectiveSpec::Ppo { epsilon } => (ppo_loss(self.policy, &params, &rollouts, epsilon), 1.0),
                    ObjectiveSpec::Cppo { epsilon, lambda, target } => {
                        (cppo_loss(self.policy, &params, &rollouts, epsilon, lambda, target), lambda)
                    }
                    ObjectiveSpec::Hppo { epsilon, schedule } => {
                        let lambda = schedule.lambda_at(step);
                        (hppo_loss(self.policy, &params, &rollouts, epsilon, lambda), lambda)
                    }
                    _ => unreachable!("checked above"),
                };
                let eval = eval.map_err(|e| abort(step, e.to_string()))?;
                check_finite(step, &eval)?;
                let (norm, lr) = apply_update(&mut opt, &mut params, eval.grad, step, total_steps)?;
                hooks.on_step(&StepMetrics {
                    step,
                    loss: eval.value,
                    grad_norm_pre_clip: norm,
                    lr,
                    lambda: Some(lambda),
                    wall_ms: elapsed_ms(&clock, cfg.log_wall_time),
                    mean_reward: Some(mean_reward),
                })?;
            }
            let done = iteration + 1;
            if done % cfg.checkpoint_every == 0 || done == cfg.steps {
                hooks.on_checkpoint(&snapshot(done, &params, &old, &baseline, &opt, &rng))?;
            }
        }
        let final_checkpoint = snapshot(cfg.steps.max(start), &params, &old, &baseline, &opt, &rng);
        Ok(TrainOutcome { params, final_checkpoint })
    }
}
