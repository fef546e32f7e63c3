#![allow(dead_code)]

use polab::objectives::{advantage_estimate, PreferencePair, Rollout};
use polab::policy::{ParamVector, Policy, PolicySpec, TokenSequence};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const V: usize = 5;

pub fn tabular(seed: u64) -> Policy {
    Policy::new(PolicySpec::tabular(V, 2, seed)).unwrap()
}

pub fn linear(seed: u64) -> Policy {
    Policy::new(PolicySpec::linear_softmax(V, 2, 3, seed)).unwrap()
}

/// Alternates between the two policy kinds.
pub fn policy_for(draw: u64) -> Policy {
    if draw.is_multiple_of(2) {
        tabular(draw)
    } else {
        linear(draw)
    }
}

pub fn seq(rng: &mut ChaCha8Rng, min: usize, max: usize) -> TokenSequence {
    let n = rng.gen_range(min..=max);
    TokenSequence((0..n).map(|_| rng.gen_range(0..V as u32)).collect())
}

pub fn pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<PreferencePair> {
    (0..n)
        .map(|_| loop {
            let x = seq(rng, 1, 3);
            let (a, b) = (seq(rng, 1, 4), seq(rng, 1, 4));
            if a != b {
                break PreferencePair::new(x, a, b).unwrap();
            }
        })
        .collect()
}

/// Rollouts sampled under `old`, with random terminal rewards and whitened
/// advantages.
pub fn rollouts(rng: &mut ChaCha8Rng, policy: &Policy, old: &ParamVector, n: usize) -> Vec<Rollout> {
    let mut out: Vec<Rollout> = (0..n)
        .map(|_| {
            let x = seq(rng, 1, 3);
            let y = seq(rng, 1, 4);
            let old_logps = policy.token_log_probs(old, &x, &y).unwrap();
            let mut rewards = vec![0.0; y.len()];
            *rewards.last_mut().unwrap() = rng.gen_range(-1.0..1.0);
            Rollout { x, y, old_logps, rewards, advantages: vec![], advantage_raw: vec![] }
        })
        .collect();
    advantage_estimate(&mut out, 1.0, true, None).unwrap();
    out
}

/// Parameters at `base` plus N(0, scale^2)-ish uniform noise.
pub fn jitter(rng: &mut ChaCha8Rng, base: &ParamVector, scale: f64) -> ParamVector {
    let mut p = base.clone();
    for v in p.values_mut() {
        *v += rng.gen_range(-scale..scale);
    }
    p
}

pub fn central_diff(f: impl Fn(&ParamVector) -> f64, at: &ParamVector, h: f64) -> Vec<f64> {
    (0..at.len())
        .map(|i| {
            let mut plus = at.clone();
            plus.values_mut()[i] += h;
            let mut minus = at.clone();
            minus.values_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}
