//! DPO and PPO objectives, their gradient-equivalent forms, and the
//! positive/negative and tertile component losses.
//!
//! Every loss is assembled on a scalar [`Tape`] whose inputs are policy
//! log-probabilities; the tape's input adjoints are then pulled back through
//! the policy. Weights that must not be differentiated (the implicit reward
//! `omega`, tertile indicators, advantages) enter the tape as constants.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{GradVector, ParamVector, Policy, TokenSequence};
use crate::stats::{quantile_partition, Tertile, TertilePartition};
use crate::tape::{sigmoid, Tape, Var};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 0.2;

/// An offline preference triple `(x, y+, y-)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub x: TokenSequence,
    pub y_plus: TokenSequence,
    pub y_minus: TokenSequence,
}

impl PreferencePair {
    pub fn new(x: TokenSequence, y_plus: TokenSequence, y_minus: TokenSequence) -> Result<Self> {
        let pair = Self { x, y_plus, y_minus };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if self.y_plus.is_empty() || self.y_minus.is_empty() {
            return Err(LabError::Domain("preference responses must be non-empty".into()));
        }
        if self.y_plus == self.y_minus {
            return Err(LabError::Domain("y_plus and y_minus must differ".into()));
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self {
            x: self.x.clone(),
            y_plus: self.y_minus.clone(),
            y_minus: self.y_plus.clone(),
        }
    }
}

/// An online sample with per-token bookkeeping from the old policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub x: TokenSequence,
    pub y: TokenSequence,
    pub old_logps: Vec<f64>,
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub advantages: Vec<f64>,
    #[serde(default)]
    pub advantage_raw: Vec<f64>,
}

impl Rollout {
    fn check_ready(&self, index: usize) -> Result<()> {
        let n = self.y.len();
        if self.old_logps.len() != n {
            return Err(LabError::Contract(format!(
                "rollout {index}: old_logps has {} entries for {n} tokens",
                self.old_logps.len()
            )));
        }
        if self.advantages.len() != n {
            return Err(LabError::Contract(format!(
                "rollout {index}: advantages not populated ({} of {n})",
                self.advantages.len()
            )));
        }
        if self.old_logps.iter().any(|&l| !(l <= 0.0)) {
            return Err(LabError::Numeric {
                index,
                what: "old log-prob must be finite and <= 0".into(),
            });
        }
        Ok(())
    }
}

/// The DPO reweighting `omega`, always strictly inside `(0, beta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicitReward {
    pub omega: f64,
}

/// A loss value together with its parameter gradient.
#[derive(Clone, Debug)]
pub struct Evaluated {
    pub value: f64,
    pub grad: GradVector,
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(LabError::Domain(format!("beta must be > 0, got {beta}")))
    }
}

fn check_batch<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        Err(LabError::Domain("batch must be non-empty".into()))
    } else {
        Ok(())
    }
}

/// Sequence log-likelihoods of one pair under the policy and the reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLogProbs {
    pub plus: f64,
    pub minus: f64,
    pub ref_plus: f64,
    pub ref_minus: f64,
}

impl PairLogProbs {
    pub fn margin(&self) -> f64 {
        self.plus - self.minus
    }

    pub fn ref_margin(&self) -> f64 {
        self.ref_plus - self.ref_minus
    }

    /// `beta * sigma(-beta * margin + beta * ref_margin)`. The sigmoid
    /// saturates in f64 for margins beyond ~37/beta, so the result is held to
    /// the nearest representable values inside the open interval.
    pub fn omega(&self, beta: f64) -> f64 {
        let w = beta * sigmoid(-beta * self.margin() + beta * self.ref_margin());
        w.max(f64::from_bits(1)).min(beta.next_down())
    }
}

pub fn pair_log_probs(
    policy: &Policy,
    params: &ParamVector,
    ref_params: &ParamVector,
    batch: &[PreferencePair],
) -> Result<Vec<PairLogProbs>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let lp = PairLogProbs {
                plus: policy.log_prob(params, &pair.x, &pair.y_plus)?,
                minus: policy.log_prob(params, &pair.x, &pair.y_minus)?,
                ref_plus: policy.log_prob(ref_params, &pair.x, &pair.y_plus)?,
                ref_minus: policy.log_prob(ref_params, &pair.x, &pair.y_minus)?,
            };
            if [lp.plus, lp.minus, lp.ref_plus, lp.ref_minus].iter().all(|v| v.is_finite()) {
                Ok(lp)
            } else {
                Err(LabError::Numeric {
                    index: i,
                    what: "non-finite log-probability".into(),
                })
            }
        })
        .collect()
}

/// Builds a per-pair objective on a tape whose inputs are `(log pi(y+),
/// log pi(y-))` for each pair, then maps input adjoints onto parameters.
fn pair_objective<F>(
    policy: &Policy,
    params: &ParamVector,
    batch: &[PreferencePair],
    lps: &[PairLogProbs],
    mut term: F,
) -> Result<Evaluated>
where
    F: FnMut(&mut Tape, usize, Var, Var) -> Var,
{
    let mut tape = Tape::new();
    let mut terms = Vec::with_capacity(batch.len());
    for (i, lp) in lps.iter().enumerate() {
        let plus = tape.input(lp.plus);
        let minus = tape.input(lp.minus);
        terms.push(term(&mut tape, i, plus, minus));
    }
    let total = tape.sum(&terms);
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    let value = tape.value(loss);
    if !value.is_finite() {
        return Err(LabError::Numeric {
            index: 0,
            what: "non-finite batch loss".into(),
        });
    }
    let adj = tape.input_gradients(loss);
    let mut grad = params.zeros_grad();
    for (i, pair) in batch.iter().enumerate() {
        let (a_plus, a_minus) = (adj[2 * i], adj[2 * i + 1]);
        if a_plus != 0.0 {
            policy.accumulate_grad(params, &pair.x, &pair.y_plus, a_plus, &mut grad)?;
        }
        if a_minus != 0.0 {
            policy.accumulate_grad(params, &pair.x, &pair.y_minus, a_minus, &mut grad)?;
        }
    }
    Ok(Evaluated { value, grad })
}

/// Per-pair margin scale for the generalised log-sigmoid objective:
/// `z = beta * (plus_coef * (lp+ - ref+) - minus_coef * (lp- - ref-))`.
pub(crate) fn log_sigmoid_objective(
    policy: &Policy,
    params: &ParamVector,
    ref_params: &ParamVector,
    batch: &[PreferencePair],
    beta: f64,
    plus_coef: f64,
    minus_coef: f64,
) -> Result<Evaluated> {
    check_beta(beta)?;
    check_batch(batch)?;
    let lps = pair_log_probs(policy, params, ref_params, batch)?;
    pair_objective(policy, params, batch, &lps, |tape, i, plus, minus| {
        let ref_plus = tape.constant(lps[i].ref_plus);
        let ref_minus = tape.constant(lps[i].ref_minus);
        let ratio_plus = tape.sub(plus, ref_plus);
        let ratio_minus = tape.sub(minus, ref_minus);
        let a = tape.scale(ratio_plus, plus_coef);
        let b = tape.scale(ratio_minus, minus_coef);
        let diff = tape.sub(a, b);
        let z = tape.scale(diff, beta);
        let ls = tape.log_sigmoid(z);
        tape.scale(ls, -1.0)
    })
}

/// Bradley-Terry log-sigmoid preference loss against a frozen reference.
pub fn dpo_loss(
    policy: &Policy,
    params: &ParamVector,
    ref_params: &ParamVector,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<Evaluated> {
    log_sigmoid_objective(policy, params, ref_params, batch, beta, 1.0, 1.0)
}

pub fn implicit_reward(
    policy: &Policy,
    params: &ParamVector,
    ref_params: &ParamVector,
    pair: &PreferencePair,
    beta: f64,
) -> Result<ImplicitReward> {
    check_beta(beta)?;
    let lp = pair_log_probs(policy, params, ref_params, std::slice::from_ref(pair))?[0];
    Ok(ImplicitReward { omega: lp.omega(beta) })
}

/// `-mean[omega * (plus_w * log pi(y+) - minus_w * log pi(y-))]` with `omega`
/// held constant. Every DPO component is an instance of this form.
pub fn dpo_weighted(
    policy: &Policy,
    params: &ParamVector,
    ref_params: &ParamVector,
    batch: &[PreferencePair],
    beta: f64,
    plus_weights: &[f64],
    minus_weights: &[f64],
) -> Result<Evaluated> {
    check_beta(beta)?;
    check_batch(batch)?;
    if plus_weights.len() != batch.len() || minus_weights.len() != batch.len() {
        return Err(LabError::Contract("one weight per pair required".into()));
    }
    let lps = pair_log_probs(policy, params, ref_params, batch)?;
    dpo_weighted_with(policy, params, batch, &lps, beta, plus_weights, minus_weights)
}

pub(crate) fn dpo_weighted_with(
    policy: &Policy,
    params: &ParamVector,
    batch: &[PreferencePair],
    lps: &[PairLogProbs],
    beta: f64,
    plus_weights: &[f64],
    minus_weights: &[f64],
) -> Result<Evaluated> {
    pair_objective(policy, params, batch, lps, |tape, i, plus, minus| {
        let omega = lps[i].omega(beta);
        let a = tape.scale(plus, plus_weights[i]);
        let b = tape.scale(minus, minus_weights[i]);
        let diff = tape.sub(a, b);
        let w = tape.constant(-omega);
        tape.mul(w, diff)
    })
}

/// Gradient-equivalent form of [`dpo_loss`]. Equivalence needs `omega` to be
/// a stop-gradient weight, so `omega_detached = false` is rejected.
pub fn dpo_hat_loss(
    policy: &Policy,
    params: &ParamVector,
    ref_params: &ParamVector,
    batch: &[PreferencePair],
    beta: f64,
    omega_detached: bool,
) -> Result<Evaluated> {
    if !omega_detached {
        return Err(LabError::Contract(
            "gradient equivalence requires a detached implicit reward".into(),
        ));
    }
    let ones = vec![1.0; batch.len()];
    dpo_weighted(policy, params, ref_params, batch, beta, &ones, &ones)
}

/// Positive/negative and tertile components of an objective.
#[derive(Clone, Debug)]
pub struct Components {
    pub pos: Evaluated,
    pub neg: Evaluated,
    pub top: Evaluated,
    pub mid: Evaluated,
    pub bot: Evaluated,
    pub partition: TertilePartition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ObjectiveId {
    Tot,
    Pos,
    Neg,
    Top,
    Mid,
    Bot,
}

impl ObjectiveId {
    pub const ALL: [ObjectiveId; 6] = [
        ObjectiveId::Tot,
        ObjectiveId::Pos,
        ObjectiveId::Neg,
        ObjectiveId::Top,
        ObjectiveId::Mid,
        ObjectiveId::Bot,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveId::Tot => "TOT",
            ObjectiveId::Pos => "POS",
            ObjectiveId::Neg => "NEG",
            ObjectiveId::Top => "TOP",
            ObjectiveId::Mid => "MID",
            ObjectiveId::Bot => "BOT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|id| id.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| LabError::Domain(format!("unknown objective component '{s}'")))
    }

    fn tertile(&self) -> Option<Tertile> {
        match self {
            ObjectiveId::Top => Some(Tertile::Top),
            ObjectiveId::Mid => Some(Tertile::Mid),
            ObjectiveId::Bot => Some(Tertile::Bot),
            _ => None,
        }
    }
}

impl std::fmt::Display for ObjectiveId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn indicator(membership: &[Tertile], which: Tertile) -> Vec<f64> {
    membership.iter().map(|&m| if m == which { 1.0 } else { 0.0 }).collect()
}

/// Per-pair weights `(plus, minus)` selecting one DPO component, given the
/// tertile membership of each pair by `omega`.
pub fn dpo_component_weights(id: ObjectiveId, membership: &[Tertile]) -> (Vec<f64>, Vec<f64>) {
    let n = membership.len();
    match id {
        ObjectiveId::Tot => (vec![1.0; n], vec![1.0; n]),
        ObjectiveId::Pos => (vec![1.0; n], vec![0.0; n]),
        ObjectiveId::Neg => (vec![0.0; n], vec![1.0; n]),
        _ => {
            let w = indicator(membership, id.tertile().expect("tertile component"));
            (w.clone(), w)
        }
    }
}

pub fn dpo_omegas(lps: &[PairLogProbs], beta: f64) -> Vec<f64> {
    lps.iter().map(|lp| lp.omega(beta)).collect()
}

pub fn dpo_component_losses(
    policy: &Policy,
    params: &ParamVector,
    ref_params: &ParamVector,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<Components> {
    check_beta(beta)?;
    check_batch(batch)?;
    let lps = pair_log_probs(policy, params, ref_params, batch)?;
    let partition = quantile_partition(&dpo_omegas(&lps, beta))?;
    let membership = partition.membership(batch.len());
    let eval = |id| {
        let (pw, mw) = dpo_component_weights(id, &membership);
        dpo_weighted_with(policy, params, batch, &lps, beta, &pw, &mw)
    };
    Ok(Components {
        pos: eval(ObjectiveId::Pos)?,
        neg: eval(ObjectiveId::Neg)?,
        top: eval(ObjectiveId::Top)?,
        mid: eval(ObjectiveId::Mid)?,
        bot: eval(ObjectiveId::Bot)?,
        partition,
    })
}

/// One-sided ratio clip: upper bound for non-negative advantages, lower
/// bound otherwise.
pub fn clip_op(ratio: f64, advantage_sign: f64, epsilon: f64) -> f64 {
    if advantage_sign >= 0.0 {
        ratio.min(1.0 + epsilon)
    } else {
        ratio.max(1.0 - epsilon)
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(LabError::Domain(format!("epsilon must lie in (0, 1), got {epsilon}")))
    }
}

/// Advantages of all tokens in batch order.
pub fn flat_advantages(rollouts: &[Rollout]) -> Vec<f64> {
    rollouts.iter().flat_map(|r| r.advantages.iter().copied()).collect()
}

pub fn token_count(rollouts: &[Rollout]) -> usize {
    rollouts.iter().map(|r| r.y.len()).sum()
}

/// `-mean_tokens[w_t * CLIP(ratio_t) * A_t]` with the ratio taken against the
/// stored old log-probs. All PPO-family objectives route through here.
pub fn ppo_weighted(
    policy: &Policy,
    params: &ParamVector,
    rollouts: &[Rollout],
    epsilon: f64,
    token_weights: &[f64],
) -> Result<Evaluated> {
    check_epsilon(epsilon)?;
    check_batch(rollouts)?;
    for (i, r) in rollouts.iter().enumerate() {
        r.check_ready(i)?;
    }
    let n_tokens = token_count(rollouts);
    if token_weights.len() != n_tokens {
        return Err(LabError::Contract(format!(
            "{} token weights for {n_tokens} tokens",
            token_weights.len()
        )));
    }

    let mut tape = Tape::new();
    let mut terms = Vec::with_capacity(n_tokens);
    let mut flat = 0;
    for (i, r) in rollouts.iter().enumerate() {
        let lps = policy.token_log_probs(params, &r.x, &r.y)?;
        for (t, lp) in lps.into_iter().enumerate() {
            if !lp.is_finite() {
                return Err(LabError::Numeric {
                    index: i,
                    what: format!("non-finite log-prob at token {t}"),
                });
            }
            let adv = r.advantages[t];
            let lp = tape.input(lp);
            let old = tape.constant(r.old_logps[t]);
            let log_ratio = tape.sub(lp, old);
            let ratio = tape.exp(log_ratio);
            let clipped = if adv >= 0.0 {
                tape.min_const(ratio, 1.0 + epsilon)
            } else {
                tape.max_const(ratio, 1.0 - epsilon)
            };
            let weighted = tape.scale(clipped, -adv * token_weights[flat]);
            terms.push(weighted);
            flat += 1;
        }
    }
    let total = tape.sum(&terms);
    let loss = tape.scale(total, 1.0 / n_tokens as f64);
    let value = tape.value(loss);
    if !value.is_finite() {
        return Err(LabError::Numeric {
            index: 0,
            what: "non-finite PPO loss".into(),
        });
    }
    let adj = tape.input_gradients(loss);
    let mut grad = params.zeros_grad();
    let mut offset = 0;
    for r in rollouts {
        let coefs = &adj[offset..offset + r.y.len()];
        if coefs.iter().any(|&c| c != 0.0) {
            policy.accumulate_token_grads(params, &r.x, &r.y, coefs, &mut grad)?;
        }
        offset += r.y.len();
    }
    Ok(Evaluated { value, grad })
}

/// Clipped-surrogate policy loss.
pub fn ppo_loss(policy: &Policy, params: &ParamVector, rollouts: &[Rollout], epsilon: f64) -> Result<Evaluated> {
    let ones = vec![1.0; token_count(rollouts)];
    ppo_weighted(policy, params, rollouts, epsilon, &ones)
}

/// Tertile partition of all tokens by `|A|`.
pub fn advantage_partition(rollouts: &[Rollout]) -> Result<TertilePartition> {
    let abs: Vec<f64> = flat_advantages(rollouts).iter().map(|a| a.abs()).collect();
    quantile_partition(&abs)
}

/// Per-token weights selecting one PPO component.
pub fn ppo_component_weights(id: ObjectiveId, advantages: &[f64], membership: &[Tertile]) -> Vec<f64> {
    match id {
        ObjectiveId::Tot => vec![1.0; advantages.len()],
        ObjectiveId::Pos => advantages.iter().map(|&a| if a >= 0.0 { 1.0 } else { 0.0 }).collect(),
        ObjectiveId::Neg => advantages.iter().map(|&a| if a < 0.0 { 1.0 } else { 0.0 }).collect(),
        _ => indicator(membership, id.tertile().expect("tertile component")),
    }
}

pub fn ppo_component_losses(
    policy: &Policy,
    params: &ParamVector,
    rollouts: &[Rollout],
    epsilon: f64,
) -> Result<Components> {
    check_batch(rollouts)?;
    let partition = advantage_partition(rollouts)?;
    let advantages = flat_advantages(rollouts);
    let membership = partition.membership(advantages.len());
    let eval = |id| ppo_weighted(policy, params, rollouts, epsilon, &ppo_component_weights(id, &advantages, &membership));
    Ok(Components {
        pos: eval(ObjectiveId::Pos)?,
        neg: eval(ObjectiveId::Neg)?,
        top: eval(ObjectiveId::Top)?,
        mid: eval(ObjectiveId::Mid)?,
        bot: eval(ObjectiveId::Bot)?,
        partition,
    })
}

/// Per-position running mean of returns, used as a baseline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningBaseline {
    pub sums: Vec<f64>,
    pub counts: Vec<u64>,
}

impl RunningBaseline {
    pub fn mean_at(&self, t: usize) -> f64 {
        match (self.sums.get(t), self.counts.get(t)) {
            (Some(&s), Some(&c)) if c > 0 => s / c as f64,
            _ => 0.0,
        }
    }

    fn record(&mut self, t: usize, value: f64) {
        if self.sums.len() <= t {
            self.sums.resize(t + 1, 0.0);
            self.counts.resize(t + 1, 0);
        }
        self.sums[t] += value;
        self.counts[t] += 1;
    }
}

/// Discounted reward-to-go minus the running per-position baseline
/// (taken before this batch is folded in), optionally whitened over all
/// tokens of the batch.
pub fn advantage_estimate(
    rollouts: &mut [Rollout],
    gamma: f64,
    whiten: bool,
    mut baseline: Option<&mut RunningBaseline>,
) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(LabError::Domain(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let mut all_returns = Vec::with_capacity(rollouts.len());
    for (i, r) in rollouts.iter_mut().enumerate() {
        if r.rewards.len() != r.y.len() {
            return Err(LabError::Contract(format!(
                "rollout {i}: {} rewards for {} tokens",
                r.rewards.len(),
                r.y.len()
            )));
        }
        let mut returns = vec![0.0; r.rewards.len()];
        let mut acc = 0.0;
        for t in (0..r.rewards.len()).rev() {
            acc = r.rewards[t] + gamma * acc;
            returns[t] = acc;
        }
        r.advantage_raw = returns
            .iter()
            .enumerate()
            .map(|(t, g)| g - baseline.as_ref().map_or(0.0, |b| b.mean_at(t)))
            .collect();
        all_returns.push(returns);
    }
    if let Some(b) = baseline.as_mut() {
        for returns in &all_returns {
            for (t, &g) in returns.iter().enumerate() {
                b.record(t, g);
            }
        }
    }
    if whiten {
        let raw: Vec<f64> = rollouts.iter().flat_map(|r| r.advantage_raw.iter().copied()).collect();
        if raw.len() < 2 {
            return Err(LabError::Numeric {
                index: 0,
                what: format!("cannot whiten {} token(s)", raw.len()),
            });
        }
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let var = raw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        for r in rollouts.iter_mut() {
            r.advantages = r
                .advantage_raw
                .iter()
                .map(|a| if std > 1e-12 { (a - mean) / std } else { 0.0 })
                .collect();
        }
    } else {
        for r in rollouts.iter_mut() {
            r.advantages = r.advantage_raw.clone();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicySpec;

    fn seq(v: &[u32]) -> TokenSequence {
        TokenSequence(v.to_vec())
    }

    fn setup() -> (Policy, ParamVector, ParamVector, Vec<PreferencePair>) {
        let policy = Policy::new(PolicySpec::linear_softmax(6, 2, 3, 5)).unwrap();
        let params = policy.init_params(0.6);
        let reference = Policy::new(PolicySpec::linear_softmax(6, 2, 3, 9)).unwrap().init_params(0.6);
        let reference = policy.params_from(reference.into_values()).unwrap();
        let batch = vec![
            PreferencePair::new(seq(&[1, 2]), seq(&[3, 0]), seq(&[4, 5, 0])).unwrap(),
            PreferencePair::new(seq(&[2, 2]), seq(&[1]), seq(&[5, 0])).unwrap(),
            PreferencePair::new(seq(&[5, 1]), seq(&[2, 2, 0]), seq(&[3])).unwrap(),
            PreferencePair::new(seq(&[4, 3]), seq(&[1, 4]), seq(&[1, 5])).unwrap(),
        ];
        (policy, params, reference, batch)
    }

    #[test]
    fn zero_margin_is_log_two() {
        let (policy, params, _, batch) = setup();
        let l = dpo_loss(&policy, &params, &params, &batch, 0.1).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        let w = implicit_reward(&policy, &params, &params, &batch[0], 0.1).unwrap();
        assert_eq!(w.omega, 0.05);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn scalar_arithmetic_oracles() {
        // (-1 + 1.5) - (-2 + 2.5) = 0
        let lp = PairLogProbs { plus: -1.0, minus: -2.0, ref_plus: -1.5, ref_minus: -2.5 };
        let z = 0.1 * ((lp.plus - lp.ref_plus) - (lp.minus - lp.ref_minus));
        assert!((-(1.0 / (1.0 + (-z).exp())).ln() - 0.693147).abs() < 1e-6);

        let lp = PairLogProbs { plus: 0.0, minus: -1.0, ref_plus: 0.0, ref_minus: 0.0 };
        assert!((lp.omega(0.1) - 0.1 / (1.0 + 0.1f64.exp())).abs() < 1e-15);
        assert!((lp.omega(0.1) - 0.047502).abs() < 1e-6);
    }

    #[test]
    fn omega_stays_inside_open_interval_at_extreme_margins() {
        for beta in [0.1, 2.5, 5.0] {
            let far_ahead = PairLogProbs { plus: 0.0, minus: -1e4, ref_plus: 0.0, ref_minus: 0.0 };
            let far_behind = PairLogProbs { plus: -1e4, minus: 0.0, ref_plus: 0.0, ref_minus: 0.0 };
            let (lo, hi) = (far_ahead.omega(beta), far_behind.omega(beta));
            assert!(lo > 0.0 && lo < beta, "{lo}");
            assert!(hi > 0.0 && hi < beta, "{hi}");
            assert_eq!(hi, beta.next_down());
        }
    }

    #[test]
    fn hat_value_at_reference() {
        // Single-token responses on a tabular policy with log pi(y+) = -1,
        // log pi(y-) = -2 at one state.
        let policy = Policy::new(PolicySpec::tabular(3, 1, 0)).unwrap();
        let mut values = vec![0.0; policy.layout().len()];
        // Row for state token 1; logits l with l1 - lse = -1 and l2 - lse = -2.
        let (p1, p2) = ((-1.0f64).exp(), (-2.0f64).exp());
        let p0 = 1.0 - p1 - p2;
        values[3] = p0.ln();
        values[4] = p1.ln();
        values[5] = p2.ln();
        let params = policy.params_from(values).unwrap();
        let pair = PreferencePair::new(seq(&[1]), seq(&[1]), seq(&[2])).unwrap();
        let hat = dpo_hat_loss(&policy, &params, &params, std::slice::from_ref(&pair), 0.1, true).unwrap();
        assert!((hat.value - (-0.05)).abs() < 1e-12);
        assert!(matches!(
            dpo_hat_loss(&policy, &params, &params, &[pair], 0.1, false),
            Err(LabError::Contract(_))
        ));
    }

    #[test]
    fn hat_gradient_matches_dpo_gradient() {
        let (policy, params, reference, batch) = setup();
        let full = dpo_loss(&policy, &params, &reference, &batch, 0.1).unwrap();
        let hat = dpo_hat_loss(&policy, &params, &reference, &batch, 0.1, true).unwrap();
        let mut diff = full.grad.clone();
        diff.add_scaled(-1.0, &hat.grad).unwrap();
        assert!(diff.norm() / full.grad.norm() <= 1e-10);
    }

    #[test]
    fn pos_neg_split_and_tertiles() {
        let (policy, params, reference, mut batch) = setup();
        batch.extend(batch.clone().into_iter().map(|p| p.swapped()));
        let hat = dpo_hat_loss(&policy, &params, &reference, &batch, 0.1, true).unwrap();
        let c = dpo_component_losses(&policy, &params, &reference, &batch, 0.1).unwrap();
        assert!((c.pos.value + c.neg.value - hat.value).abs() < 1e-12);
        assert!((c.top.value + c.mid.value + c.bot.value - hat.value).abs() < 1e-12);
        let mut sum = c.pos.grad.clone();
        sum.add_scaled(1.0, &c.neg.grad).unwrap();
        sum.add_scaled(-1.0, &hat.grad).unwrap();
        assert!(sum.norm() <= 1e-10 * hat.grad.norm());
        assert_eq!(c.partition.len(), batch.len());
    }

    #[test]
    fn swapping_negates_margin() {
        let (policy, params, reference, batch) = setup();
        for pair in &batch {
            let lp = pair_log_probs(&policy, &params, &reference, std::slice::from_ref(pair)).unwrap()[0];
            let z = 0.1 * (lp.margin() - lp.ref_margin());
            let swapped = dpo_loss(&policy, &params, &reference, &[pair.swapped()], 0.1).unwrap();
            assert!((swapped.value - (-crate::tape::log_sigmoid(-z))).abs() < 1e-12);
        }
    }

    #[test]
    fn tertiles_need_three_pairs() {
        let (policy, params, reference, batch) = setup();
        assert!(matches!(
            dpo_component_losses(&policy, &params, &reference, &batch[..2], 0.1),
            Err(LabError::Partition(_))
        ));
    }

    #[test]
    fn clip_definition() {
        assert_eq!(clip_op(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clip_op(0.5, -1.0, 0.2), 0.8);
        for s in [-1.0, 0.0, 1.0] {
            for e in [0.05, 0.2, 0.9] {
                assert_eq!(clip_op(1.0, s, e), 1.0);
            }
        }
    }

    #[test]
    fn whitening_example() {
        let mut rs = vec![Rollout {
            x: seq(&[1]),
            y: seq(&[1, 2, 3]),
            old_logps: vec![-1.0; 3],
            rewards: vec![1.0, 1.0, 1.0],
            advantages: vec![],
            advantage_raw: vec![],
        }];
        // gamma = 1: returns are [3, 2, 1].
        advantage_estimate(&mut rs, 1.0, true, None).unwrap();
        let expect = [1.224744871391589, 0.0, -1.224744871391589];
        for (a, e) in rs[0].advantages.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn terminal_reward_to_go_is_flat() {
        let mut rs = vec![Rollout {
            x: seq(&[1]),
            y: seq(&[1, 2, 3, 0]),
            old_logps: vec![-1.0; 4],
            rewards: vec![0.0, 0.0, 0.0, 0.7],
            advantages: vec![],
            advantage_raw: vec![],
        }];
        advantage_estimate(&mut rs, 1.0, false, None).unwrap();
        assert_eq!(rs[0].advantage_raw, vec![0.7; 4]);
    }

    #[test]
    fn whitening_needs_two_tokens() {
        let mut rs = vec![Rollout {
            x: seq(&[1]),
            y: seq(&[1]),
            old_logps: vec![-1.0],
            rewards: vec![1.0],
            advantages: vec![],
            advantage_raw: vec![],
        }];
        assert!(matches!(advantage_estimate(&mut rs, 1.0, true, None), Err(LabError::Numeric { .. })));
        assert!(advantage_estimate(&mut rs, 0.0, false, None).is_err());
    }

    #[test]
    fn running_baseline_lags_one_batch() {
        let mk = |r: f64| Rollout {
            x: seq(&[1]),
            y: seq(&[1, 0]),
            old_logps: vec![-1.0; 2],
            rewards: vec![0.0, r],
            advantages: vec![],
            advantage_raw: vec![],
        };
        let mut baseline = RunningBaseline::default();
        let mut first = vec![mk(1.0), mk(3.0)];
        advantage_estimate(&mut first, 1.0, false, Some(&mut baseline)).unwrap();
        assert_eq!(first[0].advantage_raw, vec![1.0, 1.0]);
        let mut second = vec![mk(4.0)];
        advantage_estimate(&mut second, 1.0, false, Some(&mut baseline)).unwrap();
        assert_eq!(second[0].advantage_raw, vec![2.0, 2.0]);
    }

    #[test]
    fn ppo_requires_old_logps() {
        let (policy, params, _, _) = setup();
        let r = Rollout {
            x: seq(&[1, 2]),
            y: seq(&[3, 0]),
            old_logps: vec![],
            rewards: vec![0.0, 1.0],
            advantages: vec![0.5, 0.5],
            advantage_raw: vec![0.5, 0.5],
        };
        assert!(matches!(ppo_loss(&policy, &params, &[r], 0.2), Err(LabError::Contract(_))));
    }
}
