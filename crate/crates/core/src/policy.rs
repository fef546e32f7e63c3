//! Toy autoregressive softmax policies.
//!
//! Two parameterisations share one interface:
//!
//! * **tabular**: one logit row per context state, where the state is the
//!   last `context_len` tokens of `x ++ y_<t` (left-padded with EOS).
//! * **linear-softmax**: token embeddings mixed by per-position matrices into
//!   a hidden vector, then projected to logits. Its three parameter groups
//!   (`embed`, `mix`, `output`) play the role of bottom/middle/top layers for
//!   group-sliced alignment probes.
//!
//! Gradients are exact: each token contributes `coef * (onehot(y_t) - p_t)` to
//! its logits, which is then pulled back through the model by hand.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// End-of-sequence token id.
pub const EOS: u32 = 0;

/// Upper bound on tabular state-table rows.
const MAX_TABLE_ROWS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Tabular,
    LinearSoftmax,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Tabular => f.write_str("tabular"),
            PolicyKind::LinearSoftmax => f.write_str("linear-softmax"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub vocab_size: usize,
    pub context_len: usize,
    /// Ignored for the tabular kind.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    pub seed: u64,
}

fn default_embed_dim() -> usize {
    1
}

impl PolicySpec {
    pub fn tabular(vocab_size: usize, context_len: usize, seed: u64) -> Self {
        Self {
            kind: PolicyKind::Tabular,
            vocab_size,
            context_len,
            embed_dim: 1,
            seed,
        }
    }

    pub fn linear_softmax(vocab_size: usize, context_len: usize, embed_dim: usize, seed: u64) -> Self {
        Self {
            kind: PolicyKind::LinearSoftmax,
            vocab_size,
            context_len,
            embed_dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(LabError::Domain(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.context_len < 1 {
            return Err(LabError::Domain("context_len must be >= 1".into()));
        }
        match self.kind {
            PolicyKind::LinearSoftmax if self.embed_dim < 1 => {
                Err(LabError::Domain("embed_dim must be >= 1".into()))
            }
            PolicyKind::Tabular => {
                let rows = (self.vocab_size as u128).checked_pow(self.context_len as u32);
                match rows {
                    Some(r) if r <= MAX_TABLE_ROWS as u128 => Ok(()),
                    _ => Err(LabError::Domain(format!(
                        "tabular state table V^context_len too large (V={}, context_len={})",
                        self.vocab_size, self.context_len
                    ))),
                }
            }
            _ => Ok(()),
        }
    }
}

/// A named contiguous slice of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// Ordered group table covering `[0, len)` exactly once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    groups: Vec<ParamGroup>,
    len: usize,
}

impl Layout {
    pub fn new(groups: Vec<ParamGroup>) -> Result<Self> {
        let mut cursor = 0;
        for g in &groups {
            if g.start != cursor {
                return Err(LabError::Layout(format!(
                    "group '{}' starts at {} but previous groups end at {}",
                    g.name, g.start, cursor
                )));
            }
            cursor += g.len;
        }
        Ok(Self { groups, len: cursor })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(LabError::Numeric {
            index: i,
            what: "parameter entry".into(),
        }),
        None => Ok(()),
    }
}

/// Flat parameter vector with its group layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

/// Gradient taken against a [`ParamVector`]; shares its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

macro_rules! flat_vector_common {
    ($ty:ident) => {
        impl $ty {
            pub fn from_values(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
                if values.len() != layout.len() {
                    return Err(LabError::Layout(format!(
                        "{} values for a layout of length {}",
                        values.len(),
                        layout.len()
                    )));
                }
                check_finite(&values)?;
                Ok(Self { values, layout })
            }

            pub fn zeros(layout: Arc<Layout>) -> Self {
                Self {
                    values: vec![0.0; layout.len()],
                    layout,
                }
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn into_values(self) -> Vec<f64> {
                self.values
            }

            pub fn layout(&self) -> &Arc<Layout> {
                &self.layout
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            /// Values of one named group.
            pub fn slice(&self, group: &str) -> Result<&[f64]> {
                let g = self
                    .layout
                    .group(group)
                    .ok_or_else(|| LabError::Layout(format!("unknown group '{group}'")))?;
                Ok(&self.values[g.start..g.start + g.len])
            }

            pub fn norm(&self) -> f64 {
                self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
            }

            pub fn is_finite(&self) -> bool {
                self.values.iter().all(|v| v.is_finite())
            }
        }
    };
}

flat_vector_common!(ParamVector);
flat_vector_common!(GradVector);

impl ParamVector {
    pub fn zeros_grad(&self) -> GradVector {
        GradVector::zeros(self.layout.clone())
    }

    /// `self += alpha * direction`.
    pub fn add_scaled(&mut self, alpha: f64, direction: &GradVector) -> Result<()> {
        same_layout(&self.layout, direction.layout())?;
        for (p, d) in self.values.iter_mut().zip(&direction.values) {
            *p += alpha * d;
        }
        Ok(())
    }

    /// Returns `self + alpha * direction` without mutating.
    pub fn stepped(&self, alpha: f64, direction: &GradVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.add_scaled(alpha, direction)?;
        Ok(out)
    }
}

impl GradVector {
    pub fn dot(&self, other: &GradVector) -> Result<f64> {
        same_layout(&self.layout, &other.layout)?;
        Ok(dot(&self.values, &other.values))
    }

    /// Dot product restricted to one named group.
    pub fn group_dot(&self, other: &GradVector, group: &str) -> Result<f64> {
        same_layout(&self.layout, &other.layout)?;
        Ok(dot(self.slice(group)?, other.slice(group)?))
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &GradVector) -> Result<()> {
        same_layout(&self.layout, &other.layout)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> GradVector {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    /// Elementwise mean of several gradients, reduced in slice order.
    pub fn mean_of(grads: &[&GradVector]) -> Result<GradVector> {
        let first = grads
            .first()
            .ok_or_else(|| LabError::Contract("mean of zero gradients".into()))?;
        let mut acc = GradVector::zeros(first.layout.clone());
        for g in grads {
            acc.add_scaled(1.0, g)?;
        }
        acc.scale(1.0 / grads.len() as f64);
        Ok(acc)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn same_layout(a: &Arc<Layout>, b: &Arc<Layout>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a == b {
        Ok(())
    } else {
        Err(LabError::Layout("vectors have different group layouts".into()))
    }
}

/// Token ids in `[0, V)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.0.last() == Some(&EOS)
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// Decoding knobs for stochastic sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.9,
            max_len: 6,
        }
    }
}

/// Below this temperature sampling degenerates to greedy decoding.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// A policy architecture bound to its parameter layout.
#[derive(Clone, Debug)]
pub struct Policy {
    spec: PolicySpec,
    layout: Arc<Layout>,
}

struct LinearOffsets {
    embed: usize,
    mix: usize,
    bias: usize,
    out_w: usize,
    out_b: usize,
}

impl Policy {
    pub fn new(spec: PolicySpec) -> Result<Self> {
        spec.validate()?;
        let v = spec.vocab_size;
        let groups = match spec.kind {
            PolicyKind::Tabular => vec![ParamGroup {
                name: "table".into(),
                start: 0,
                len: v.pow(spec.context_len as u32) * v,
            }],
            PolicyKind::LinearSoftmax => {
                let d = spec.embed_dim;
                let embed = v * d;
                let mix = spec.context_len * d * d + d;
                let output = v * d + v;
                vec![
                    ParamGroup { name: "embed".into(), start: 0, len: embed },
                    ParamGroup { name: "mix".into(), start: embed, len: mix },
                    ParamGroup { name: "output".into(), start: embed + mix, len: output },
                ]
            }
        };
        Ok(Self {
            spec,
            layout: Arc::new(Layout::new(groups)?),
        })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(self.layout.clone())
    }

    /// Independent N(0, scale^2) entries drawn from the policy seed.
    pub fn init_params(&self, scale: f64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        let values = (0..self.layout.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        ParamVector {
            values,
            layout: self.layout.clone(),
        }
    }

    /// Wraps raw values in this policy's layout.
    pub fn params_from(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::from_values(values, self.layout.clone())
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        same_layout(&self.layout, params.layout())
    }

    pub fn check_tokens(&self, seq: &TokenSequence) -> Result<()> {
        let v = self.spec.vocab_size as u32;
        match seq.0.iter().position(|&t| t >= v) {
            Some(i) => Err(LabError::Domain(format!(
                "token {} at position {} outside vocabulary of size {}",
                seq.0[i], i, v
            ))),
            None => Ok(()),
        }
    }

    fn linear_offsets(&self) -> LinearOffsets {
        let v = self.spec.vocab_size;
        let d = self.spec.embed_dim;
        let embed = 0;
        let mix = v * d;
        let bias = mix + self.spec.context_len * d * d;
        let out_w = bias + d;
        let out_b = out_w + v * d;
        LinearOffsets { embed, mix, bias, out_w, out_b }
    }

    /// Last `context_len` tokens, most recent first, padded with EOS.
    fn window(&self, context: &[u32]) -> Vec<u32> {
        (0..self.spec.context_len)
            .map(|k| {
                context
                    .len()
                    .checked_sub(k + 1)
                    .map(|i| context[i])
                    .unwrap_or(EOS)
            })
            .collect()
    }

    fn table_row(&self, window: &[u32]) -> usize {
        window
            .iter()
            .fold(0usize, |acc, &t| acc * self.spec.vocab_size + t as usize)
    }

    /// Forward pass to logits; the hidden vector is returned for the
    /// linear kind so backward can reuse it.
    fn forward(&self, params: &[f64], window: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let v = self.spec.vocab_size;
        match self.spec.kind {
            PolicyKind::Tabular => {
                let row = self.table_row(window) * v;
                (params[row..row + v].to_vec(), Vec::new())
            }
            PolicyKind::LinearSoftmax => {
                let d = self.spec.embed_dim;
                let o = self.linear_offsets();
                let mut h = params[o.bias..o.bias + d].to_vec();
                for (k, &tok) in window.iter().enumerate() {
                    let e = &params[o.embed + tok as usize * d..o.embed + (tok as usize + 1) * d];
                    let m = &params[o.mix + k * d * d..o.mix + (k + 1) * d * d];
                    for (i, hi) in h.iter_mut().enumerate() {
                        *hi += dot(&m[i * d..(i + 1) * d], e);
                    }
                }
                let logits = (0..v)
                    .map(|tok| params[o.out_b + tok] + dot(&params[o.out_w + tok * d..o.out_w + (tok + 1) * d], &h))
                    .collect();
                (logits, h)
            }
        }
    }

    /// Pulls a logit cotangent back into `grad`.
    fn backward(&self, params: &[f64], window: &[u32], hidden: &[f64], dlogits: &[f64], grad: &mut [f64]) {
        let v = self.spec.vocab_size;
        match self.spec.kind {
            PolicyKind::Tabular => {
                let row = self.table_row(window) * v;
                for (g, dl) in grad[row..row + v].iter_mut().zip(dlogits) {
                    *g += dl;
                }
            }
            PolicyKind::LinearSoftmax => {
                let d = self.spec.embed_dim;
                let o = self.linear_offsets();
                let mut dh = vec![0.0; d];
                for tok in 0..v {
                    let g = dlogits[tok];
                    if g == 0.0 {
                        continue;
                    }
                    grad[o.out_b + tok] += g;
                    let w = o.out_w + tok * d;
                    for i in 0..d {
                        grad[w + i] += g * hidden[i];
                        dh[i] += g * params[w + i];
                    }
                }
                for i in 0..d {
                    grad[o.bias + i] += dh[i];
                }
                for (k, &tok) in window.iter().enumerate() {
                    let e0 = o.embed + tok as usize * d;
                    let m0 = o.mix + k * d * d;
                    for i in 0..d {
                        for j in 0..d {
                            grad[m0 + i * d + j] += dh[i] * params[e0 + j];
                        }
                    }
                    for j in 0..d {
                        let de: f64 = (0..d).map(|i| params[m0 + i * d + j] * dh[i]).sum();
                        grad[e0 + j] += de;
                    }
                }
            }
        }
    }

    /// Next-token distribution given the full context `x ++ y_<t`.
    pub fn next_token_probs(&self, params: &ParamVector, context: &[u32]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        let (logits, _) = self.forward(params.values(), &self.window(context));
        Ok(softmax(&logits))
    }

    /// Per-token `log pi(y_t | x, y_<t)`.
    pub fn token_log_probs(&self, params: &ParamVector, x: &TokenSequence, y: &TokenSequence) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_pair(x, y)?;
        let mut context = x.0.clone();
        let mut out = Vec::with_capacity(y.len());
        for &tok in &y.0 {
            let (logits, _) = self.forward(params.values(), &self.window(&context));
            out.push(log_softmax_at(&logits, tok as usize));
            context.push(tok);
        }
        Ok(out)
    }

    /// Sequence log-likelihood `sum_t log pi(y_t | x, y_<t)`.
    pub fn log_prob(&self, params: &ParamVector, x: &TokenSequence, y: &TokenSequence) -> Result<f64> {
        Ok(self.token_log_probs(params, x, y)?.iter().sum())
    }

    /// `grad += sum_t coefs[t] * d log pi(y_t | x, y_<t) / d params`.
    pub fn accumulate_token_grads(
        &self,
        params: &ParamVector,
        x: &TokenSequence,
        y: &TokenSequence,
        coefs: &[f64],
        grad: &mut GradVector,
    ) -> Result<()> {
        self.check_params(params)?;
        same_layout(&self.layout, grad.layout())?;
        self.check_pair(x, y)?;
        if coefs.len() != y.len() {
            return Err(LabError::Contract(format!(
                "{} coefficients for a response of length {}",
                coefs.len(),
                y.len()
            )));
        }
        let mut context = x.0.clone();
        for (&tok, &coef) in y.0.iter().zip(coefs) {
            if coef != 0.0 {
                let window = self.window(&context);
                let (logits, hidden) = self.forward(params.values(), &window);
                let mut dlogits = softmax(&logits);
                for p in &mut dlogits {
                    *p *= -coef;
                }
                dlogits[tok as usize] += coef;
                self.backward(params.values(), &window, &hidden, &dlogits, grad.values_mut());
            }
            context.push(tok);
        }
        Ok(())
    }

    /// `grad += coef * d log pi(y | x) / d params`.
    pub fn accumulate_grad(
        &self,
        params: &ParamVector,
        x: &TokenSequence,
        y: &TokenSequence,
        coef: f64,
        grad: &mut GradVector,
    ) -> Result<()> {
        self.accumulate_token_grads(params, x, y, &vec![coef; y.len()], grad)
    }

    pub fn grad_log_prob(&self, params: &ParamVector, x: &TokenSequence, y: &TokenSequence) -> Result<GradVector> {
        let mut grad = params.zeros_grad();
        self.accumulate_grad(params, x, y, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Argmax decoding; ties go to the lowest id and EOS terminates.
    pub fn greedy_decode(&self, params: &ParamVector, x: &TokenSequence, max_len: usize) -> Result<TokenSequence> {
        if max_len == 0 {
            return Err(LabError::Domain("max_len must be >= 1".into()));
        }
        self.check_params(params)?;
        self.check_tokens(x)?;
        let mut context = x.0.clone();
        let mut out = Vec::new();
        while out.len() < max_len {
            let (logits, _) = self.forward(params.values(), &self.window(&context));
            let tok = argmax_lowest(&logits) as u32;
            out.push(tok);
            context.push(tok);
            if tok == EOS {
                break;
            }
        }
        Ok(TokenSequence(out))
    }

    /// Temperature + nucleus sampling, reproducible from `rng`.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        params: &ParamVector,
        x: &TokenSequence,
        cfg: &SamplerConfig,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        validate_sampler(cfg)?;
        if cfg.temperature < GREEDY_TEMPERATURE {
            return self.greedy_decode(params, x, cfg.max_len);
        }
        self.check_params(params)?;
        self.check_tokens(x)?;
        let mut context = x.0.clone();
        let mut out = Vec::new();
        while out.len() < cfg.max_len {
            let (mut logits, _) = self.forward(params.values(), &self.window(&context));
            for l in &mut logits {
                *l /= cfg.temperature;
            }
            let probs = softmax(&logits);
            let tok = nucleus_draw(&probs, cfg.top_p, rng.gen::<f64>()) as u32;
            out.push(tok);
            context.push(tok);
            if tok == EOS {
                break;
            }
        }
        Ok(TokenSequence(out))
    }

    pub fn sample(&self, params: &ParamVector, x: &TokenSequence, cfg: &SamplerConfig, seed: u64) -> Result<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(params, x, cfg, &mut rng)
    }

    fn check_pair(&self, x: &TokenSequence, y: &TokenSequence) -> Result<()> {
        if y.is_empty() {
            return Err(LabError::Domain("response must be non-empty".into()));
        }
        self.check_tokens(x)?;
        self.check_tokens(y)
    }
}

pub fn validate_sampler(cfg: &SamplerConfig) -> Result<()> {
    if !(cfg.temperature > 0.0) || !cfg.temperature.is_finite() {
        return Err(LabError::Domain(format!("temperature must be > 0, got {}", cfg.temperature)));
    }
    if !(cfg.top_p > 0.0 && cfg.top_p <= 1.0) {
        return Err(LabError::Domain(format!("top_p must lie in (0, 1], got {}", cfg.top_p)));
    }
    if cfg.max_len == 0 {
        return Err(LabError::Domain("max_len must be >= 1".into()));
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    // Clamp the rounding case where the realised token holds all the mass.
    (logits[idx] - lse).min(0.0)
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws from the smallest high-probability prefix whose mass reaches
/// `top_p`, using one uniform `u` in `[0, 1)`.
fn nucleus_draw(probs: &[f64], top_p: f64, u: f64) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    let nucleus = &order[..kept];
    let mut target = u * mass;
    for &i in nucleus {
        target -= probs[i];
        if target < 0.0 {
            return i;
        }
    }
    nucleus[kept - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[u32]) -> TokenSequence {
        TokenSequence(v.to_vec())
    }

    #[test]
    fn uniform_tabular_single_token() {
        let policy = Policy::new(PolicySpec::tabular(4, 1, 0)).unwrap();
        let params = policy.zeros();
        let lp = policy.log_prob(&params, &seq(&[1]), &seq(&[2])).unwrap();
        assert!((lp - (0.25f64).ln()).abs() < 1e-15);
        assert!((lp + 1.386294).abs() < 1e-6);
    }

    #[test]
    fn uniform_gradient_is_onehot_minus_softmax() {
        let policy = Policy::new(PolicySpec::tabular(4, 1, 0)).unwrap();
        let params = policy.zeros();
        let x = seq(&[1]);
        let g = policy.grad_log_prob(&params, &x, &seq(&[2])).unwrap();
        // state = last token of x = 1 -> row 1
        assert_eq!(&g.values()[4..8], &[-0.25, -0.25, 0.75, -0.25]);
        assert!(g.values()[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chain_rule_and_gradient_linearity() {
        let policy = Policy::new(PolicySpec::linear_softmax(5, 2, 3, 11)).unwrap();
        let params = policy.init_params(0.5);
        let x = seq(&[1, 4]);
        let y = seq(&[3, 2]);
        let lp = policy.log_prob(&params, &x, &y).unwrap();
        let first = policy.log_prob(&params, &x, &seq(&[3])).unwrap();
        let second = policy.log_prob(&params, &seq(&[1, 4, 3]), &seq(&[2])).unwrap();
        assert!((lp - (first + second)).abs() < 1e-14);

        let g = policy.grad_log_prob(&params, &x, &y).unwrap();
        let mut parts = policy.grad_log_prob(&params, &x, &seq(&[3])).unwrap();
        parts
            .add_scaled(1.0, &policy.grad_log_prob(&params, &seq(&[1, 4, 3]), &seq(&[2])).unwrap())
            .unwrap();
        for (a, b) in g.values().iter().zip(parts.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn greedy_conventions() {
        let policy = Policy::new(PolicySpec::tabular(5, 1, 0)).unwrap();
        let zeros = policy.zeros();
        let out = policy.greedy_decode(&zeros, &seq(&[2]), 6).unwrap();
        assert_eq!(out, seq(&[0]));

        let mut values = vec![0.0; policy.layout().len()];
        for row in 0..5 {
            values[row * 5 + 3] = 10.0;
        }
        let params = policy.params_from(values).unwrap();
        let out = policy.greedy_decode(&params, &seq(&[2]), 4).unwrap();
        assert_eq!(out, seq(&[3, 3, 3, 3]));
        assert_eq!(out, policy.greedy_decode(&params, &seq(&[2]), 4).unwrap());
    }

    #[test]
    fn out_of_vocab_is_domain_error() {
        let policy = Policy::new(PolicySpec::tabular(4, 1, 0)).unwrap();
        let params = policy.zeros();
        assert!(matches!(
            policy.log_prob(&params, &seq(&[1]), &seq(&[4])),
            Err(LabError::Domain(_))
        ));
        assert!(matches!(
            policy.log_prob(&params, &seq(&[1]), &seq(&[])),
            Err(LabError::Domain(_))
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(Policy::new(PolicySpec::tabular(1, 1, 0)).is_err());
        assert!(Policy::new(PolicySpec::tabular(4, 0, 0)).is_err());
        assert!(Policy::new(PolicySpec::linear_softmax(4, 1, 0, 0)).is_err());
    }

    #[test]
    fn sampler_validation_and_determinism() {
        let policy = Policy::new(PolicySpec::linear_softmax(6, 2, 4, 3)).unwrap();
        let params = policy.init_params(1.0);
        let x = seq(&[1, 2]);
        let bad = SamplerConfig { temperature: 0.0, ..Default::default() };
        assert!(policy.sample(&params, &x, &bad, 1).is_err());
        let bad = SamplerConfig { top_p: 1.5, ..Default::default() };
        assert!(policy.sample(&params, &x, &bad, 1).is_err());

        let cfg = SamplerConfig { temperature: 1.0, top_p: 0.9, max_len: 8 };
        assert_eq!(policy.sample(&params, &x, &cfg, 42).unwrap(), policy.sample(&params, &x, &cfg, 42).unwrap());

        let cold = SamplerConfig { temperature: 1e-7, top_p: 0.9, max_len: 8 };
        assert_eq!(policy.sample(&params, &x, &cold, 5).unwrap(), policy.greedy_decode(&params, &x, 8).unwrap());
    }

    #[test]
    fn nucleus_keeps_only_head() {
        let probs = [0.05, 0.6, 0.3, 0.05];
        for k in 0..100 {
            let u = k as f64 / 100.0;
            let i = nucleus_draw(&probs, 0.85, u);
            assert!(i == 1 || i == 2);
        }
    }

    #[test]
    fn group_dots_sum_to_full_dot() {
        let policy = Policy::new(PolicySpec::linear_softmax(5, 2, 3, 1)).unwrap();
        let p = policy.init_params(0.7);
        let a = policy.grad_log_prob(&p, &seq(&[1, 2]), &seq(&[3, 0])).unwrap();
        let b = policy.grad_log_prob(&p, &seq(&[4, 2]), &seq(&[1])).unwrap();
        let total = a.dot(&b).unwrap();
        let by_group: f64 = policy
            .layout()
            .groups()
            .iter()
            .map(|g| a.group_dot(&b, &g.name).unwrap())
            .sum();
        assert!((total - by_group).abs() < 1e-10);
    }
}
