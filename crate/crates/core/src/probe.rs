//! Gradient-alignment probes.
//!
//! `G(L) = E_{D'}[-grad log pi(y'|x')] . grad L`: positive values mean a
//! small descent step on `L` lowers the negative log-likelihood of the
//! final responses `D'`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::objectives::{
    dpo_component_weights, dpo_omegas, dpo_weighted_with, pair_log_probs, ppo_component_weights, ppo_weighted, Evaluated, ObjectiveId,
    PairLogProbs, PreferencePair, Rollout,
};
use crate::policy::{GradVector, ParamVector, Policy};
use crate::stats::{iqr_filter, quantile_partition, Tertile};
use crate::synth::FinalResponseSet;
use crate::trainer::optim::OptimizerState;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Default probe sample size and batch sizes.
pub const DEFAULT_PROBE_SAMPLES: usize = 500;
pub const DEFAULT_DPO_PROBE_BATCH: usize = 4;
pub const DEFAULT_PPO_PROBE_BATCH: usize = 6;

/// One probe measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub schema: u32,
    pub step: u64,
    pub objective_id: ObjectiveId,
    pub g_value: f64,
    pub n_batches_used: usize,
    pub n_batches_filtered: usize,
    pub obj_grad_norm: f64,
    pub target_grad_norm: f64,
    /// Alignment restricted to each parameter group.
    #[serde(default)]
    pub g_groups: BTreeMap<String, f64>,
    /// Alignment of the optimizer-preconditioned direction, when known.
    #[serde(default)]
    pub g_precond: Option<f64>,
    /// Training loss rose at this step; such records are excluded from
    /// aggregate statistics.
    #[serde(default)]
    pub loss_increased: Option<bool>,
}

impl AlignmentRecord {
    /// Normalised alignment, i.e. the cosine between the two gradients.
    pub fn cosine(&self) -> f64 {
        let denom = self.obj_grad_norm * self.target_grad_norm;
        if denom > 0.0 {
            self.g_value / denom
        } else {
            0.0
        }
    }
}

/// Mean negative log-likelihood of `D'` and its gradient.
pub fn nll_objective(policy: &Policy, params: &ParamVector, dprime: &FinalResponseSet) -> Result<Evaluated> {
    if dprime.is_empty() {
        return Err(LabError::Probe("final response set is empty".into()));
    }
    let n = dprime.len() as f64;
    let mut grad = params.zeros_grad();
    let mut value = 0.0;
    for item in &dprime.items {
        value -= policy.log_prob(params, &item.x, &item.y)?;
        policy.accumulate_grad(params, &item.x, &item.y, -1.0 / n, &mut grad)?;
    }
    Ok(Evaluated { value: value / n, grad })
}

/// `E_{D'}[-grad log pi(y'|x')]`.
pub fn target_gradient(policy: &Policy, params: &ParamVector, dprime: &FinalResponseSet) -> Result<GradVector> {
    Ok(nll_objective(policy, params, dprime)?.grad)
}

/// Dot product of the two gradients, optionally restricted to one group.
pub fn gradient_alignment(obj_grad: &GradVector, target_grad: &GradVector, group: Option<&str>) -> Result<f64> {
    match group {
        Some(g) => obj_grad.group_dot(target_grad, g),
        None => obj_grad.dot(target_grad),
    }
}

/// Aggregated alignment over a set of per-batch gradients.
#[derive(Clone, Debug)]
pub struct BatchAlignment {
    pub g_value: f64,
    pub mean_grad: GradVector,
    pub kept: Vec<usize>,
    pub n_filtered: usize,
}

/// Averages the batch gradients (dropping IQR outliers by norm when
/// `filter` is set and there are at least four batches) and dots the mean
/// with `target`.
pub fn aggregate_alignment(batch_grads: &[GradVector], target: &GradVector, filter: bool) -> Result<BatchAlignment> {
    if batch_grads.is_empty() {
        return Err(LabError::Probe("no probe batches".into()));
    }
    let kept: Vec<usize> = if filter && batch_grads.len() >= 4 {
        let norms: Vec<f64> = batch_grads.iter().map(GradVector::norm).collect();
        iqr_filter(&norms)?.kept_indices
    } else {
        (0..batch_grads.len()).collect()
    };
    if kept.is_empty() {
        return Err(LabError::Probe("every probe batch was filtered as an outlier".into()));
    }
    let refs: Vec<&GradVector> = kept.iter().map(|&i| &batch_grads[i]).collect();
    let mean_grad = GradVector::mean_of(&refs)?;
    let g_value = gradient_alignment(&mean_grad, target, None)?;
    Ok(BatchAlignment {
        g_value,
        n_filtered: batch_grads.len() - kept.len(),
        mean_grad,
        kept,
    })
}

/// Data a probe differentiates the objective family on.
#[derive(Clone, Copy, Debug)]
pub enum ProbeData<'a> {
    Pairs {
        pairs: &'a [PreferencePair],
        ref_params: &'a ParamVector,
        beta: f64,
    },
    Rollouts {
        rollouts: &'a [Rollout],
        epsilon: f64,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    pub step: u64,
    pub batch_size: usize,
    pub iqr: bool,
}

/// Per-batch gradients of every requested component, in batch order.
/// Tertile thresholds are taken over the whole probe sample.
pub fn component_batch_gradients(
    policy: &Policy,
    params: &ParamVector,
    data: ProbeData<'_>,
    suite: &[ObjectiveId],
    batch_size: usize,
) -> Result<BTreeMap<ObjectiveId, Vec<GradVector>>> {
    if batch_size == 0 {
        return Err(LabError::Domain("probe batch size must be >= 1".into()));
    }
    let mut out = BTreeMap::new();
    match data {
        ProbeData::Pairs { pairs, ref_params, beta } => {
            if pairs.len() < batch_size.max(3) {
                return Err(LabError::Probe(format!("only {} probe pairs", pairs.len())));
            }
            let lps = pair_log_probs(policy, params, ref_params, pairs)?;
            let membership = quantile_partition(&dpo_omegas(&lps, beta))?.membership(pairs.len());
            let n_batches = pairs.len() / batch_size;
            for &id in suite {
                let grads = (0..n_batches)
                    .into_par_iter()
                    .map(|b| {
                        let r = b * batch_size..(b + 1) * batch_size;
                        dpo_batch_grad(policy, params, &pairs[r.clone()], &lps[r.clone()], beta, id, &membership[r])
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.insert(id, grads);
            }
        }
        ProbeData::Rollouts { rollouts, epsilon } => {
            if rollouts.len() < batch_size {
                return Err(LabError::Probe(format!("only {} probe rollouts", rollouts.len())));
            }
            let advantages = crate::objectives::flat_advantages(rollouts);
            let abs: Vec<f64> = advantages.iter().map(|a| a.abs()).collect();
            let membership = quantile_partition(&abs)?.membership(abs.len());
            let mut offsets = Vec::with_capacity(rollouts.len() + 1);
            offsets.push(0);
            for r in rollouts {
                offsets.push(offsets.last().unwrap() + r.y.len());
            }
            let n_batches = rollouts.len() / batch_size;
            for &id in suite {
                let weights_all = ppo_component_weights(id, &advantages, &membership);
                let grads = (0..n_batches)
                    .into_par_iter()
                    .map(|b| {
                        let (lo, hi) = (b * batch_size, (b + 1) * batch_size);
                        let w = &weights_all[offsets[lo]..offsets[hi]];
                        Ok(ppo_weighted(policy, params, &rollouts[lo..hi], epsilon, w)?.grad)
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.insert(id, grads);
            }
        }
    }
    Ok(out)
}

fn dpo_batch_grad(
    policy: &Policy,
    params: &ParamVector,
    pairs: &[PreferencePair],
    lps: &[PairLogProbs],
    beta: f64,
    id: ObjectiveId,
    membership: &[Tertile],
) -> Result<GradVector> {
    let (pw, mw) = dpo_component_weights(id, membership);
    Ok(dpo_weighted_with(policy, params, pairs, lps, beta, &pw, &mw)?.grad)
}

/// Probes every objective in `suite` at one checkpoint.
pub fn probe_checkpoint(
    policy: &Policy,
    params: &ParamVector,
    data: ProbeData<'_>,
    suite: &[ObjectiveId],
    dprime: &FinalResponseSet,
    options: ProbeOptions,
    optimizer: Option<&OptimizerState>,
) -> Result<Vec<AlignmentRecord>> {
    let target = target_gradient(policy, params, dprime)?;
    let target_norm = target.norm();
    let per_batch = component_batch_gradients(policy, params, data, suite, options.batch_size)?;
    suite
        .iter()
        .map(|id| {
            let agg = aggregate_alignment(&per_batch[id], &target, options.iqr)?;
            let g_groups = params
                .layout()
                .groups()
                .iter()
                .map(|g| Ok((g.name.clone(), agg.mean_grad.group_dot(&target, &g.name)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let g_precond = match optimizer {
                Some(opt) => Some(opt.preconditioned_direction(&agg.mean_grad).dot(&target)?),
                None => None,
            };
            Ok(AlignmentRecord {
                schema: TRACE_SCHEMA_VERSION,
                step: options.step,
                objective_id: *id,
                g_value: agg.g_value,
                n_batches_used: agg.kept.len(),
                n_batches_filtered: agg.n_filtered,
                obj_grad_norm: agg.mean_grad.norm(),
                target_grad_norm: target_norm,
                g_groups,
                g_precond,
                loss_increased: None,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorCheck {
    pub g_value: f64,
    pub predicted_delta: f64,
    pub actual_delta: f64,
    pub residual: f64,
}

/// Compares the first-order prediction `-eta G` with the realised change in
/// `D'` negative log-likelihood after one plain gradient step of size `eta`.
pub fn taylor_validate<F>(
    policy: &Policy,
    params: &ParamVector,
    objective: F,
    dprime: &FinalResponseSet,
    eta: f64,
) -> Result<TaylorCheck>
where
    F: Fn(&ParamVector) -> Result<Evaluated>,
{
    if !(eta >= 0.0) {
        return Err(LabError::Domain(format!("eta must be >= 0, got {eta}")));
    }
    let obj = objective(params)?;
    let before = nll_objective(policy, params, dprime)?;
    let g_value = obj.grad.dot(&before.grad)?;
    let stepped = params.stepped(-eta, &obj.grad)?;
    let after = nll_objective(policy, &stepped, dprime)?;
    let predicted_delta = -eta * g_value;
    let actual_delta = after.value - before.value;
    Ok(TaylorCheck {
        g_value,
        predicted_delta,
        actual_delta,
        residual: (actual_delta - predicted_delta).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicySpec, TokenSequence};
    use crate::synth::FinalResponse;

    fn dprime_for(policy: &Policy, params: &ParamVector) -> FinalResponseSet {
        let items = [[1u32, 2], [3, 1], [2, 2], [4, 3]]
            .iter()
            .map(|x| {
                let x = TokenSequence(x.to_vec());
                let y = policy.greedy_decode(params, &x, 3).unwrap();
                FinalResponse { x, y }
            })
            .collect();
        FinalResponseSet { items, provenance: "test".into(), params_hash: String::new() }
    }

    #[test]
    fn alignment_signs() {
        let policy = Policy::new(PolicySpec::linear_softmax(5, 2, 3, 2)).unwrap();
        let params = policy.init_params(0.7);
        let d = dprime_for(&policy, &params);
        let t = target_gradient(&policy, &params, &d).unwrap();
        let n2 = t.dot(&t).unwrap();
        assert_eq!(gradient_alignment(&t, &t, None).unwrap(), n2);
        assert_eq!(gradient_alignment(&t.scaled(-1.0), &t, None).unwrap(), -n2);
        let by_group: f64 = ["embed", "mix", "output"]
            .iter()
            .map(|g| gradient_alignment(&t, &t, Some(g)).unwrap())
            .sum();
        assert!((by_group - n2).abs() < 1e-10);
    }

    #[test]
    fn single_item_target_is_negative_grad_log_prob() {
        let policy = Policy::new(PolicySpec::linear_softmax(5, 2, 3, 2)).unwrap();
        let params = policy.init_params(0.7);
        let mut d = dprime_for(&policy, &params);
        d.items.truncate(1);
        let t = target_gradient(&policy, &params, &d).unwrap();
        let g = policy.grad_log_prob(&params, &d.items[0].x, &d.items[0].y).unwrap();
        for (a, b) in t.values().iter().zip(g.values()) {
            assert_eq!(*a, -b);
        }
        d.items.clear();
        assert!(matches!(target_gradient(&policy, &params, &d), Err(LabError::Probe(_))));
    }

    #[test]
    fn all_filtered_is_an_error() {
        let policy = Policy::new(PolicySpec::tabular(2, 1, 0)).unwrap();
        let t = GradVector::zeros(policy.layout().clone());
        assert!(aggregate_alignment(&[], &t, true).is_err());
    }

    #[test]
    fn taylor_zero_step() {
        let policy = Policy::new(PolicySpec::tabular(5, 1, 2)).unwrap();
        let params = policy.init_params(0.5);
        let d = dprime_for(&policy, &params);
        let c = taylor_validate(&policy, &params, |p| nll_objective(&policy, p, &d), &d, 0.0).unwrap();
        assert_eq!(c.predicted_delta, 0.0);
        assert_eq!(c.actual_delta, 0.0);
        let c = taylor_validate(&policy, &params, |p| nll_objective(&policy, p, &d), &d, 1e-2).unwrap();
        assert!(c.actual_delta < 0.0);
        assert!(c.g_value > 0.0);
    }
}
