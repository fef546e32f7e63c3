//! Controlled objectives and their lambda schedules.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::objectives::{
    advantage_partition, flat_advantages, log_sigmoid_objective, ppo_weighted, Evaluated, PreferencePair, Rollout,
};
use crate::policy::{ParamVector, Policy};
use crate::stats::Tertile;

/// Linear ramp from 0 at `t1` to 1 at `t2`, clamped.
pub fn cdpo_lambda(t: f64, t1: f64, t2: f64) -> f64 {
    ((t - t1) / (t2 - t1)).clamp(0.0, 1.0)
}

/// `max(min(sin(pi t / t3), 0), -tau) + 1`: one for the first half-period,
/// dipping to `1 - tau` in the second, period `2 t3`.
///
/// The phase is reduced modulo the period first so that `sin` never sees a
/// large argument; values on the first half-period are exactly one.
pub fn hppo_lambda(t: f64, t3: f64, tau: f64) -> f64 {
    let phase = t.rem_euclid(2.0 * t3);
    if phase <= t3 {
        return 1.0;
    }
    (std::f64::consts::PI * phase / t3).sin().min(0.0).max(-tau) + 1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    CdpoRamp { t1: u64, t2: u64 },
    HppoSine { t3: u64, tau: f64 },
    Constant { value: f64 },
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScheduleSpec::CdpoRamp { t1, t2 } if t1 >= t2 => {
                Err(LabError::Domain(format!("ramp needs t1 < t2, got ({t1}, {t2})")))
            }
            ScheduleSpec::HppoSine { t3, tau } if t3 < 1 || !(tau > 0.0 && tau < 1.0) => Err(LabError::Domain(
                format!("sine schedule needs t3 >= 1 and 0 < tau < 1, got ({t3}, {tau})"),
            )),
            ScheduleSpec::Constant { value } if !(0.0..=1.0).contains(&value) => {
                Err(LabError::Domain(format!("constant lambda must lie in [0, 1], got {value}")))
            }
            _ => Ok(()),
        }
    }

    /// Lambda at optimizer step `t`.
    pub fn lambda_at(&self, t: u64) -> f64 {
        match *self {
            ScheduleSpec::CdpoRamp { t1, t2 } => cdpo_lambda(t as f64, t1 as f64, t2 as f64),
            ScheduleSpec::HppoSine { t3, tau } => hppo_lambda(t as f64, t3 as f64, tau),
            ScheduleSpec::Constant { value } => value,
        }
    }

    /// Rescales step counts, e.g. to shrink long-run settings to toy runs.
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |t: u64| ((t as f64) * factor).round().max(0.0) as u64;
        match *self {
            ScheduleSpec::CdpoRamp { t1, t2 } => {
                let (a, b) = (s(t1), s(t2));
                ScheduleSpec::CdpoRamp { t1: a, t2: b.max(a + 1) }
            }
            ScheduleSpec::HppoSine { t3, tau } => ScheduleSpec::HppoSine { t3: s(t3).max(1), tau },
            c @ ScheduleSpec::Constant { .. } => c,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(LabError::Domain(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

/// DPO with the chosen log-ratio scaled by `1 - lambda` and the rejected one
/// by `lambda`.
pub fn cdpo_loss(
    policy: &Policy,
    params: &ParamVector,
    ref_params: &ParamVector,
    batch: &[PreferencePair],
    beta: f64,
    lambda: f64,
) -> Result<Evaluated> {
    check_lambda(lambda)?;
    log_sigmoid_objective(policy, params, ref_params, batch, beta, 1.0 - lambda, lambda)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CppoTarget {
    Top,
    Mid,
}

impl CppoTarget {
    fn tertile(self) -> Tertile {
        match self {
            CppoTarget::Top => Tertile::Top,
            CppoTarget::Mid => Tertile::Mid,
        }
    }
}

/// Token weights for cPPO: `lambda` on the targeted `|A|` tertile, 1 elsewhere.
pub fn cppo_weights(rollouts: &[Rollout], lambda: f64, target: CppoTarget) -> Result<Vec<f64>> {
    let partition = advantage_partition(rollouts)?;
    let membership = partition.membership(partition.len());
    Ok(membership
        .into_iter()
        .map(|m| if m == target.tertile() { lambda } else { 1.0 })
        .collect())
}

pub fn cppo_loss(
    policy: &Policy,
    params: &ParamVector,
    rollouts: &[Rollout],
    epsilon: f64,
    lambda: f64,
    target: CppoTarget,
) -> Result<Evaluated> {
    check_lambda(lambda)?;
    let weights = cppo_weights(rollouts, lambda, target)?;
    ppo_weighted(policy, params, rollouts, epsilon, &weights)
}

/// Token weights for hPPO: `lambda` on negative-advantage tokens.
pub fn hppo_weights(rollouts: &[Rollout], lambda: f64) -> Vec<f64> {
    flat_advantages(rollouts)
        .into_iter()
        .map(|a| if a < 0.0 { lambda } else { 1.0 })
        .collect()
}

pub fn hppo_loss(
    policy: &Policy,
    params: &ParamVector,
    rollouts: &[Rollout],
    epsilon: f64,
    lambda: f64,
) -> Result<Evaluated> {
    check_lambda(lambda)?;
    ppo_weighted(policy, params, rollouts, epsilon, &hppo_weights(rollouts, lambda))
}
