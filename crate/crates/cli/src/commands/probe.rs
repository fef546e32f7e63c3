//! `probe`: gradient-alignment traces over a series of checkpoints.

use std::path::{Path, PathBuf};

use polab::objectives::{ObjectiveId, RunningBaseline};
use polab::policy::{Policy, TokenSequence};
use polab::probe::{probe_checkpoint, AlignmentRecord, ProbeData, ProbeOptions};
use polab::synth::{build_final_responses, gen_rollouts, sample_subset, FinalResponseSet, Sampler};
use polab::trainer::{Checkpoint, StepMetrics};

use crate::commands::data::{self, Dataset};
use crate::commands::train::{load_checkpoint, METRICS_FILE};
use crate::config::Resolved;
use crate::error::{CliError, Result};
use crate::io::{read_jsonl, write_bytes, JsonlWriter};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const FINAL_RESPONSES_FILE: &str = "final_responses.json";

/// Checkpoint paths matching `pattern`, ordered by step.
pub fn checkpoint_paths(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern)
        .map_err(|e| CliError::Usage(format!("bad checkpoint glob {pattern:?}: {e}")))?
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("reading checkpoint glob: {e}")))?;
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no checkpoints match {pattern:?}")));
    }
    Ok(paths)
}

/// Whether the mean training loss over the interval ending at `step` exceeds
/// the mean over the previous interval of the same length.
fn loss_increased(metrics: &[StepMetrics], prev_step: u64, step: u64) -> Option<bool> {
    let len = step.checked_sub(prev_step)?;
    if len == 0 || prev_step < len {
        return None;
    }
    let mean = |lo: u64, hi: u64| {
        let v: Vec<f64> = metrics.iter().filter(|m| m.step >= lo && m.step < hi).map(|m| m.loss).collect();
        (v.len() as u64 == hi - lo).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some(mean(prev_step, step)? > mean(prev_step - len, prev_step)?)
}

/// Prompts for probe rollouts: the training prompts, cycled to `n`.
fn probe_prompts(train: &[TokenSequence], n: usize) -> Vec<TokenSequence> {
    (0..n).map(|i| train[i % train.len()].clone()).collect()
}

pub struct ProbeRun {
    pub records: Vec<AlignmentRecord>,
    pub final_responses: FinalResponseSet,
}

/// Probes the given checkpoints (already loaded and ordered by step).
pub fn probe_series(
    cfg: &Resolved,
    data: &Dataset,
    checkpoints: &[(String, Checkpoint)],
    suite: &[ObjectiveId],
    metrics: &[StepMetrics],
) -> Result<ProbeRun> {
    let (final_name, final_ckpt) = checkpoints.last().expect("non-empty checkpoint list");
    let policy = Policy::new(final_ckpt.policy.clone())?;
    let dprime = build_final_responses(&policy, &final_ckpt.params, &data.eval_prompts, cfg.sampler.max_len, final_name)?;

    let pair_idx = sample_subset(data.pairs.len(), cfg.probe.samples, cfg.probe.seed);
    let probe_pairs: Vec<_> = pair_idx.iter().map(|&i| data.pairs[i].clone()).collect();
    let rollout_prompts = probe_prompts(&data.train_prompts, cfg.probe.samples);

    let mut records = Vec::new();
    let mut prev_step = None;
    for (k, (_, ckpt)) in checkpoints.iter().enumerate() {
        if k % cfg.probe.every != 0 && k + 1 != checkpoints.len() {
            continue;
        }
        if ckpt.policy != final_ckpt.policy {
            return Err(CliError::Usage("checkpoints in one probe run must share a policy spec".into()));
        }
        let options = ProbeOptions { step: ckpt.step, batch_size: cfg.probe.batch_size, iqr: cfg.probe.iqr };
        let offline = matches!(ckpt.objective.as_str(), "dpo" | "cdpo");
        let mut batch = if offline {
            let reference = ckpt
                .section_params("ref")?
                .ok_or_else(|| CliError::Usage(format!("checkpoint at step {} lacks reference params", ckpt.step)))?;
            let beta = match cfg.objective {
                polab::trainer::ObjectiveSpec::Dpo { beta } | polab::trainer::ObjectiveSpec::Cdpo { beta, .. } => beta,
                _ => polab::objectives::DEFAULT_BETA,
            };
            let data = ProbeData::Pairs { pairs: &probe_pairs, ref_params: &reference, beta };
            probe_checkpoint(&policy, &ckpt.params, data, suite, &dprime, options, Some(&ckpt.optimizer))?
        } else {
            let mut baseline = RunningBaseline {
                sums: ckpt.section("baseline_sums").unwrap_or_default().to_vec(),
                counts: ckpt.section("baseline_counts").unwrap_or_default().iter().map(|&c| c as u64).collect(),
            };
            let sampler = Sampler { policy: &policy, params: &ckpt.params, config: cfg.sampler };
            let seed = cfg.probe.seed.wrapping_add(ckpt.step);
            let rollouts =
                gen_rollouts(&data.task, &rollout_prompts, sampler, seed, cfg.train.advantage, Some(&mut baseline))?;
            let epsilon = match cfg.objective {
                polab::trainer::ObjectiveSpec::Ppo { epsilon }
                | polab::trainer::ObjectiveSpec::Cppo { epsilon, .. }
                | polab::trainer::ObjectiveSpec::Hppo { epsilon, .. } => epsilon,
                _ => polab::objectives::DEFAULT_EPSILON,
            };
            let data = ProbeData::Rollouts { rollouts: &rollouts, epsilon };
            probe_checkpoint(&policy, &ckpt.params, data, suite, &dprime, options, Some(&ckpt.optimizer))?
        };
        let flag = prev_step.and_then(|p| loss_increased(metrics, p, ckpt.step));
        for r in &mut batch {
            r.loss_increased = flag;
        }
        records.extend(batch);
        prev_step = Some(ckpt.step);
    }
    Ok(ProbeRun { records, final_responses: dprime })
}

pub fn cmd_probe(
    cfg: &Resolved,
    root: &Path,
    pattern: Option<&str>,
    suite: &[ObjectiveId],
    trace: Option<&Path>,
) -> Result<PathBuf> {
    let default_pattern = root.join(cfg.objective.name()).join("ckpt_*.bin");
    let pattern = pattern.map(str::to_string).unwrap_or_else(|| default_pattern.display().to_string());
    let paths = checkpoint_paths(&pattern)?;
    let mut checkpoints = paths
        .iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, load_checkpoint(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    checkpoints.sort_by_key(|(_, c)| c.step);

    let run_dir = paths[0].parent().map(Path::to_path_buf).unwrap_or_default();
    let metrics_path = run_dir.join(METRICS_FILE);
    let metrics: Vec<StepMetrics> = if metrics_path.exists() { read_jsonl(&metrics_path)? } else { Vec::new() };

    let data = data::load(cfg, root)?;
    let out = probe_series(cfg, &data, &checkpoints, suite, &metrics)?;

    let trace_path = trace.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join(TRACE_FILE));
    let mut writer = JsonlWriter::create(&trace_path)?;
    for r in &out.records {
        writer.write(r)?;
    }
    let mut dprime = serde_json::to_vec_pretty(&out.final_responses)?;
    dprime.push(b'\n');
    write_bytes(&run_dir.join(FINAL_RESPONSES_FILE), &dprime)?;
    println!(
        "probed {} checkpoints, {} records -> {}",
        checkpoints.len(),
        out.records.len(),
        trace_path.display()
    );
    Ok(trace_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(step: u64, loss: f64) -> StepMetrics {
        StepMetrics { step, loss, grad_norm_pre_clip: 0.0, lr: 0.0, lambda: None, wall_ms: 0, mean_reward: None }
    }

    #[test]
    fn interval_loss_comparison() {
        let metrics: Vec<_> = [3.0, 3.0, 2.0, 2.0, 2.5, 2.5].iter().enumerate().map(|(i, &l)| m(i as u64, l)).collect();
        assert_eq!(loss_increased(&metrics, 2, 4), Some(false));
        assert_eq!(loss_increased(&metrics, 4, 6), Some(true));
        assert_eq!(loss_increased(&metrics, 0, 2), None);
    }
}
