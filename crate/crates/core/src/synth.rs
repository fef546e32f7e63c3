//! Synthetic preference tasks with a hidden reward, plus the data sets the
//! trainers and probes consume.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::objectives::{advantage_estimate, PreferencePair, Rollout, RunningBaseline};
use crate::policy::{ParamVector, Policy, SamplerConfig, TokenSequence, EOS};

/// RNG stream ids, one per generated artifact family.
const STREAM_PROMPT_EMB: u64 = 1;
const STREAM_RESP_EMB: u64 = 2;
const STREAM_TRAIN_PROMPTS: u64 = 3;
const STREAM_EVAL_PROMPTS: u64 = 4;
const STREAM_OVERLAP: u64 = 5;
const STREAM_SUBSET: u64 = 6;

/// Per-item RNG: stream `base + index` of the given seed.
pub fn item_rng(seed: u64, base: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(base.wrapping_mul(1 << 32).wrapping_add(index));
    rng
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub prompt_len: usize,
    pub resp_len: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_feature_dim() -> usize {
    4
}

/// A task whose reward is the cosine between a prompt feature and a
/// response feature, each a sum of fixed random token embeddings. EOS
/// carries no response feature.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    spec: TaskSpec,
    prompt_emb: Vec<f64>,
    resp_emb: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        if spec.vocab_size < 2 {
            return Err(LabError::Domain(format!("vocab_size must be >= 2, got {}", spec.vocab_size)));
        }
        if spec.prompt_len < 1 || spec.resp_len < 1 || spec.feature_dim < 1 {
            return Err(LabError::Domain("prompt_len, resp_len and feature_dim must be >= 1".into()));
        }
        let draw = |stream| {
            let mut rng = item_rng(spec.seed, stream, 0);
            (0..spec.vocab_size * spec.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f64>>()
        };
        Ok(Self {
            prompt_emb: draw(STREAM_PROMPT_EMB),
            resp_emb: draw(STREAM_RESP_EMB),
            spec,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    fn feature(&self, table: &[f64], tokens: &[u32], skip_eos: bool) -> Vec<f64> {
        let k = self.spec.feature_dim;
        let mut f = vec![0.0; k];
        for &t in tokens {
            if skip_eos && t == EOS {
                continue;
            }
            let row = &table[t as usize * k..(t as usize + 1) * k];
            for (a, b) in f.iter_mut().zip(row) {
                *a += b;
            }
        }
        f
    }

    /// Deterministic reward in `[-1, 1]`.
    pub fn hidden_reward(&self, x: &TokenSequence, y: &TokenSequence) -> f64 {
        let fx = self.feature(&self.prompt_emb, x.tokens(), false);
        let fy = self.feature(&self.resp_emb, y.tokens(), true);
        let nx = fx.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = fy.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            return 0.0;
        }
        let cos = fx.iter().zip(&fy).map(|(a, b)| a * b).sum::<f64>() / (nx * ny);
        cos.clamp(-1.0, 1.0)
    }

    fn draw_prompt<R: Rng>(&self, rng: &mut R) -> TokenSequence {
        TokenSequence(
            (0..self.spec.prompt_len)
                .map(|_| rng.gen_range(1..self.spec.vocab_size as u32))
                .collect(),
        )
    }

    pub fn train_prompts(&self, n: usize) -> Vec<TokenSequence> {
        let mut rng = item_rng(self.spec.seed, STREAM_TRAIN_PROMPTS, 0);
        (0..n).map(|_| self.draw_prompt(&mut rng)).collect()
    }

    /// Evaluation prompts: `round(overlap * n)` of them are drawn from
    /// `train`, the rest are fresh prompts absent from `train`.
    pub fn eval_prompts(&self, n: usize, overlap: f64, train: &[TokenSequence]) -> Result<Vec<TokenSequence>> {
        if !(0.0..=1.0).contains(&overlap) {
            return Err(LabError::Domain(format!("overlap fraction must lie in [0, 1], got {overlap}")));
        }
        let n_shared = ((overlap * n as f64).round() as usize).min(n);
        if n_shared > 0 && train.is_empty() {
            return Err(LabError::Generation("overlap requested but no training prompts".into()));
        }
        let mut out = Vec::with_capacity(n);
        let mut pick = item_rng(self.spec.seed, STREAM_OVERLAP, 0);
        for _ in 0..n_shared {
            out.push(train[pick.gen_range(0..train.len())].clone());
        }
        let seen: HashSet<&TokenSequence> = train.iter().collect();
        let mut rng = item_rng(self.spec.seed, STREAM_EVAL_PROMPTS, 0);
        let mut attempts = 0usize;
        while out.len() < n {
            let p = self.draw_prompt(&mut rng);
            attempts += 1;
            if !seen.contains(&p) {
                out.push(p);
            } else if attempts > 1000 * n.max(1) {
                return Err(LabError::Generation("could not draw held-out prompts".into()));
            }
        }
        Ok(out)
    }
}

/// `k` distinct indices below `n` in ascending order, or all of them when
/// `k >= n`. Deterministic in `seed`.
pub fn sample_subset(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = item_rng(seed, STREAM_SUBSET, 0);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Behavior policy used to draw candidate responses.
#[derive(Clone, Copy, Debug)]
pub struct Sampler<'a> {
    pub policy: &'a Policy,
    pub params: &'a ParamVector,
    pub config: SamplerConfig,
}

pub const MAX_PAIR_ATTEMPTS: usize = 256;

/// One labelled pair per prompt: two distinct responses with distinct
/// hidden rewards, the higher-reward one as `y_plus`.
pub fn gen_pairs(
    task: &SyntheticTask,
    prompts: &[TokenSequence],
    sampler: Sampler<'_>,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if prompts.is_empty() {
        return Err(LabError::Domain("need at least one prompt".into()));
    }
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = item_rng(seed, 100, i as u64);
            for _ in 0..MAX_PAIR_ATTEMPTS {
                let a = sampler.policy.sample_with(sampler.params, x, &sampler.config, &mut rng)?;
                let b = sampler.policy.sample_with(sampler.params, x, &sampler.config, &mut rng)?;
                if a == b {
                    continue;
                }
                let (ra, rb) = (task.hidden_reward(x, &a), task.hidden_reward(x, &b));
                if ra == rb {
                    continue;
                }
                let (y_plus, y_minus) = if ra > rb { (a, b) } else { (b, a) };
                return PreferencePair::new(x.clone(), y_plus, y_minus);
            }
            Err(LabError::Generation(format!(
                "prompt {i}: no distinct, reward-separated responses after {MAX_PAIR_ATTEMPTS} attempts"
            )))
        })
        .collect()
}

/// Advantage estimation knobs for rollout generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageConfig {
    pub gamma: f64,
    pub whiten: bool,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self { gamma: 1.0, whiten: true }
    }
}

/// Samples one response per prompt from the old policy, records its
/// per-token log-probs, places the hidden reward on the last token, and
/// populates advantages.
pub fn gen_rollouts(
    task: &SyntheticTask,
    prompts: &[TokenSequence],
    sampler: Sampler<'_>,
    seed: u64,
    advantage: AdvantageConfig,
    baseline: Option<&mut RunningBaseline>,
) -> Result<Vec<Rollout>> {
    if prompts.is_empty() {
        return Err(LabError::Domain("need at least one prompt".into()));
    }
    let mut rollouts = prompts
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = item_rng(seed, 200, i as u64);
            let y = sampler.policy.sample_with(sampler.params, x, &sampler.config, &mut rng)?;
            let old_logps = sampler.policy.token_log_probs(sampler.params, x, &y)?;
            let mut rewards = vec![0.0; y.len()];
            *rewards.last_mut().expect("non-empty response") = task.hidden_reward(x, &y);
            Ok(Rollout {
                x: x.clone(),
                y,
                old_logps,
                rewards,
                advantages: Vec::new(),
                advantage_raw: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    advantage_estimate(&mut rollouts, advantage.gamma, advantage.whiten, baseline)?;
    Ok(rollouts)
}

/// Hex SHA-256 over the little-endian parameter payload.
pub fn params_digest(params: &ParamVector) -> String {
    let mut h = Sha256::new();
    for v in params.values() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalResponse {
    pub x: TokenSequence,
    pub y: TokenSequence,
}

/// Greedy responses of the final policy, tagged with the checkpoint they
/// came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalResponseSet {
    pub items: Vec<FinalResponse>,
    pub provenance: String,
    pub params_hash: String,
}

impl FinalResponseSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn build_final_responses(
    policy: &Policy,
    params_po: &ParamVector,
    prompts_eval: &[TokenSequence],
    max_len: usize,
    provenance: &str,
) -> Result<FinalResponseSet> {
    if prompts_eval.is_empty() {
        return Err(LabError::Domain("need at least one evaluation prompt".into()));
    }
    let items = prompts_eval
        .iter()
        .map(|x| {
            Ok(FinalResponse {
                x: x.clone(),
                y: policy.greedy_decode(params_po, x, max_len)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FinalResponseSet {
        items,
        provenance: provenance.to_string(),
        params_hash: params_digest(params_po),
    })
}

/// Mean hidden reward of greedy responses; the desk-scale quality metric.
pub fn greedy_reward(
    task: &SyntheticTask,
    policy: &Policy,
    params: &ParamVector,
    prompts: &[TokenSequence],
    max_len: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(LabError::Domain("need at least one prompt".into()));
    }
    let mut total = 0.0;
    for x in prompts {
        total += task.hidden_reward(x, &policy.greedy_decode(params, x, max_len)?);
    }
    Ok(total / prompts.len() as f64)
}

/// Tabular single-context state for the linearised gradient flow.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub probs: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowDirection {
    Positive,
    Negative,
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
        return Err(LabError::Domain(format!("{what} is not a probability vector")));
    }
    Ok(())
}

impl FlowState {
    pub fn new(probs: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        if probs.len() != target.len() || probs.len() < 2 {
            return Err(LabError::Domain("flow vectors must share a length >= 2".into()));
        }
        check_simplex(&probs, "probs")?;
        check_simplex(&target, "target")?;
        Ok(Self { probs, target })
    }

    pub fn distance(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            .sqrt()
    }
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    for p in v.iter_mut() {
        *p /= s;
    }
}

/// One Euler step of `d pi / dt = +-(target - pi)` (unit rate constant).
/// Returns the new state and whether the simplex clamp was active.
pub fn flow_step(state: &FlowState, direction: FlowDirection, step_size: f64) -> (FlowState, bool) {
    let sign = match direction {
        FlowDirection::Positive => 1.0,
        FlowDirection::Negative => -1.0,
    };
    let mut probs: Vec<f64> = state
        .probs
        .iter()
        .zip(&state.target)
        .map(|(p, t)| p + sign * step_size * (t - p))
        .collect();
    normalize(&mut probs);
    let mut clamped = false;
    if probs.iter().any(|&p| p < 0.0) {
        clamped = true;
        for p in &mut probs {
            *p = p.max(0.0);
        }
        normalize(&mut probs);
    }
    (
        FlowState {
            probs,
            target: state.target.clone(),
        },
        clamped,
    )
}

/// Reweighted target `q ∝ omega * p`.
pub fn reweighted_target(target: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != target.len() || weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(LabError::Domain("reweighting needs one non-negative weight per outcome".into()));
    }
    let mut q: Vec<f64> = target.iter().zip(weights).map(|(p, w)| p * w).collect();
    let s: f64 = q.iter().sum();
    if s <= 0.0 {
        return Err(LabError::Domain("reweighted target has zero mass".into()));
    }
    for v in &mut q {
        *v /= s;
    }
    Ok(q)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrajectory {
    pub effective_target: Vec<f64>,
    /// Distance to the effective target before the first step and after each step.
    pub distances: Vec<f64>,
    /// First step (1-based) at which the simplex clamp engaged.
    pub boundary_step: Option<usize>,
    pub final_probs: Vec<f64>,
}

pub fn flow_experiment(
    initial: &FlowState,
    direction: FlowDirection,
    reweight: Option<&[f64]>,
    steps: usize,
    step_size: f64,
) -> Result<FlowTrajectory> {
    if steps < 1 {
        return Err(LabError::Domain("steps must be >= 1".into()));
    }
    if !(step_size > 0.0) {
        return Err(LabError::Domain("step_size must be > 0".into()));
    }
    let target = match reweight {
        Some(w) => reweighted_target(&initial.target, w)?,
        None => initial.target.clone(),
    };
    let mut state = FlowState {
        probs: initial.probs.clone(),
        target: target.clone(),
    };
    let mut distances = Vec::with_capacity(steps + 1);
    distances.push(state.distance());
    let mut boundary_step = None;
    for k in 1..=steps {
        let (next, clamped) = flow_step(&state, direction, step_size);
        if clamped && boundary_step.is_none() {
            boundary_step = Some(k);
        }
        state = next;
        distances.push(state.distance());
    }
    Ok(FlowTrajectory {
        effective_target: target,
        distances,
        boundary_step,
        final_probs: state.probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicySpec;

    fn task() -> SyntheticTask {
        SyntheticTask::new(TaskSpec {
            seed: 3,
            vocab_size: 8,
            prompt_len: 2,
            resp_len: 4,
            feature_dim: 4,
        })
        .unwrap()
    }

    #[test]
    fn reward_is_bounded_and_deterministic() {
        let t = task();
        let x = TokenSequence(vec![1, 5]);
        for y in [vec![2, 3], vec![0], vec![7, 7, 0], vec![1, 2, 3, 4]] {
            let y = TokenSequence(y);
            let r = t.hidden_reward(&x, &y);
            assert!((-1.0..=1.0).contains(&r));
            assert_eq!(r, task().hidden_reward(&x, &y));
        }
        assert_eq!(t.hidden_reward(&x, &TokenSequence(vec![0])), 0.0);
    }

    #[test]
    fn eval_prompts_respect_overlap() {
        let t = task();
        let train = t.train_prompts(20);
        let held_out = t.eval_prompts(10, 0.0, &train).unwrap();
        assert!(held_out.iter().all(|p| !train.contains(p)));
        let shared = t.eval_prompts(10, 1.0, &train).unwrap();
        assert!(shared.iter().all(|p| train.contains(p)));
        assert!(t.eval_prompts(10, 1.5, &train).is_err());
    }

    #[test]
    fn pairs_are_labelled_and_reproducible() {
        let t = task();
        let policy = Policy::new(PolicySpec::linear_softmax(8, 2, 3, 1)).unwrap();
        let params = policy.init_params(0.5);
        let sampler = Sampler {
            policy: &policy,
            params: &params,
            config: SamplerConfig { temperature: 1.0, top_p: 1.0, max_len: 4 },
        };
        let prompts = t.train_prompts(30);
        let a = gen_pairs(&t, &prompts, sampler, 11).unwrap();
        let b = gen_pairs(&t, &prompts, sampler, 11).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(t.hidden_reward(&p.x, &p.y_plus) > t.hidden_reward(&p.x, &p.y_minus));
        }
    }

    #[test]
    fn degenerate_sampler_fails_generation() {
        let t = task();
        let policy = Policy::new(PolicySpec::tabular(8, 1, 1)).unwrap();
        let params = policy.zeros();
        // Greedy decoding always yields [EOS], so no distinct pair exists.
        let sampler = Sampler {
            policy: &policy,
            params: &params,
            config: SamplerConfig { temperature: 1e-9, top_p: 1.0, max_len: 4 },
        };
        let err = gen_pairs(&t, &t.train_prompts(2), sampler, 0).unwrap_err();
        assert!(matches!(err, LabError::Generation(_)));
    }

    #[test]
    fn rollouts_carry_terminal_reward() {
        let t = task();
        let policy = Policy::new(PolicySpec::linear_softmax(8, 2, 3, 1)).unwrap();
        let params = policy.init_params(0.5);
        let sampler = Sampler {
            policy: &policy,
            params: &params,
            config: SamplerConfig { temperature: 1.0, top_p: 1.0, max_len: 4 },
        };
        let rs = gen_rollouts(&t, &t.train_prompts(12), sampler, 5, AdvantageConfig::default(), None).unwrap();
        for r in &rs {
            assert!(r.old_logps.iter().sum::<f64>().exp() <= 1.0);
            let recomputed = policy.token_log_probs(&params, &r.x, &r.y).unwrap();
            for (a, b) in recomputed.iter().zip(&r.old_logps) {
                assert!((a - b).abs() < 1e-12);
            }
            let n = r.rewards.len();
            assert!(r.rewards[..n - 1].iter().all(|&v| v == 0.0));
            assert_eq!(r.rewards[n - 1], t.hidden_reward(&r.x, &r.y));
        }
    }

    #[test]
    fn final_responses_are_greedy() {
        let t = task();
        let policy = Policy::new(PolicySpec::linear_softmax(8, 2, 3, 1)).unwrap();
        let params = policy.init_params(0.8);
        let prompts = t.eval_prompts(6, 0.0, &t.train_prompts(6)).unwrap();
        let a = build_final_responses(&policy, &params, &prompts, 4, "ckpt-7").unwrap();
        let b = build_final_responses(&policy, &params, &prompts, 4, "ckpt-7").unwrap();
        assert_eq!(a, b);
        for item in &a.items {
            assert!(item.y.ends_with_eos() || item.y.len() == 4);
        }
    }

    #[test]
    fn flow_one_step_and_fixed_point() {
        let s = FlowState::new(vec![0.5, 0.5], vec![0.8, 0.2]).unwrap();
        let (n, _) = flow_step(&s, FlowDirection::Positive, 0.1);
        assert!((n.probs[0] - 0.53).abs() < 1e-15);
        assert!((n.probs[1] - 0.47).abs() < 1e-15);

        let s = FlowState::new(vec![0.8, 0.2], vec![0.8, 0.2]).unwrap();
        assert_eq!(flow_step(&s, FlowDirection::Positive, 0.1).0, s);
    }

    #[test]
    fn reweighting_two_to_one() {
        let s = FlowState::new(vec![0.1, 0.9], vec![0.5, 0.5]).unwrap();
        let tr = flow_experiment(&s, FlowDirection::Positive, Some(&[2.0, 1.0]), 400, 0.1).unwrap();
        assert!((tr.effective_target[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tr.final_probs[0] - 2.0 / 3.0).abs() < 1e-9);
        let uniform = flow_experiment(&s, FlowDirection::Positive, Some(&[3.0, 3.0]), 1, 0.1).unwrap();
        assert_eq!(uniform.effective_target, vec![0.5, 0.5]);
    }

    #[test]
    fn negative_flow_diverges_until_boundary() {
        let eps = 1e-3 / 2f64.sqrt();
        let s = FlowState::new(vec![0.3 + eps, 0.7 - eps], vec![0.3, 0.7]).unwrap();
        let tr = flow_experiment(&s, FlowDirection::Negative, None, 200, 0.1).unwrap();
        let b = tr.boundary_step.expect("reaches the boundary");
        for k in 0..b {
            assert!(tr.distances[k + 1] > tr.distances[k]);
        }
    }
}
