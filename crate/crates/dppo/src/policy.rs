//! Tabular softmax sequence policy.
//!
//! Parameters are dense logits indexed `[prompt][position][token]`. Token
//! positions are conditionally independent given the prompt, which keeps
//! log-probabilities, sampling, and score gradients exact and cheap while
//! preserving everything the surrogate objective manipulates: per-sequence
//! (and per-token) log-probs, probability ratios, and advantages.

use rand::distributions::WeightedIndex;
use rand::prelude::*;

use crate::env::{Completion, TaskSpec};
use crate::error::{Error, Result};

/// Dense policy parameters with shape `(num_prompts, completion_len, vocab_size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub num_prompts: usize,
    pub completion_len: usize,
    pub vocab_size: usize,
    logits: Vec<f64>,
}

impl PolicyParams {
    /// All-zero logits: the uniform policy for every prompt and position.
    pub fn zeros(spec: &TaskSpec) -> Self {
        PolicyParams {
            num_prompts: spec.num_prompts,
            completion_len: spec.completion_len,
            vocab_size: spec.vocab_size,
            logits: vec![0.0; spec.num_prompts * spec.completion_len * spec.vocab_size],
        }
    }

    /// Rebuild parameters from a flat vector; inverse of [`PolicyParams::flatten`].
    pub fn from_flat(spec: &TaskSpec, flat: Vec<f64>) -> Result<Self> {
        let expected = spec.num_prompts * spec.completion_len * spec.vocab_size;
        if flat.len() != expected {
            return Err(Error::invalid_input(format!(
                "flat parameter vector has length {}, expected {expected}",
                flat.len()
            )));
        }
        Ok(PolicyParams {
            num_prompts: spec.num_prompts,
            completion_len: spec.completion_len,
            vocab_size: spec.vocab_size,
            logits: flat,
        })
    }

    /// The flat view of the logits; `from_flat(flatten(p)) == p` exactly.
    pub fn flatten(&self) -> Vec<f64> {
        self.logits.clone()
    }

    pub fn dimension(&self) -> usize {
        self.logits.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.logits.len() != self.num_prompts * self.completion_len * self.vocab_size {
            return Err(Error::invalid_input("logit buffer has wrong length"));
        }
        if !self.logits.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid_input("logits must all be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn block_offset(&self, prompt_id: usize, position: usize) -> usize {
        (prompt_id * self.completion_len + position) * self.vocab_size
    }

    /// Logit row for one `(prompt, position)`.
    #[inline]
    pub fn row(&self, prompt_id: usize, position: usize) -> &[f64] {
        let off = self.block_offset(prompt_id, position);
        &self.logits[off..off + self.vocab_size]
    }

    #[inline]
    pub fn logit_mut(&mut self, prompt_id: usize, position: usize, token: usize) -> &mut f64 {
        let off = self.block_offset(prompt_id, position);
        &mut self.logits[off + token]
    }

    /// Gradient-ascent step: `logits += step * grad`.
    pub fn add_scaled(&mut self, grad: &GradientVector, step: f64) {
        assert_eq!(grad.len(), self.logits.len());
        for (l, g) in self.logits.iter_mut().zip(grad.as_slice()) {
            *l += step * g;
        }
    }
}

/// A flat gradient with the same layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        GradientVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        GradientVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.0.iter_mut() {
            *a *= factor;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Largest absolute componentwise difference.
    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        assert_eq!(self.0.len(), other.0.len());
        self.0
            .iter()
            .zip(other.0.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// `log Σ exp(row)` with max subtraction so saturated logits cannot overflow.
fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let sum: f64 = row.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_completion(params: &PolicyParams, c: &Completion) -> Result<()> {
    if c.prompt_id >= params.num_prompts {
        return Err(Error::invalid_input(format!(
            "prompt_id {} out of range [0, {})",
            c.prompt_id, params.num_prompts
        )));
    }
    if c.tokens.len() != params.completion_len {
        return Err(Error::invalid_input(format!(
            "completion has {} tokens, expected {}",
            c.tokens.len(),
            params.completion_len
        )));
    }
    if let Some(&tok) = c.tokens.iter().find(|&&t| t >= params.vocab_size) {
        return Err(Error::invalid_input(format!(
            "token {tok} out of range [0, {})",
            params.vocab_size
        )));
    }
    Ok(())
}

/// Log-probability of a completion: per-position `logit - logsumexp`, summed.
pub fn log_prob(params: &PolicyParams, c: &Completion) -> Result<f64> {
    Ok(token_log_probs(params, c)?.iter().sum())
}

/// Per-position log-probabilities of a completion's tokens.
pub fn token_log_probs(params: &PolicyParams, c: &Completion) -> Result<Vec<f64>> {
    check_completion(params, c)?;
    Ok(c.tokens
        .iter()
        .enumerate()
        .map(|(pos, &tok)| {
            let row = params.row(c.prompt_id, pos);
            row[tok] - log_sum_exp(row)
        })
        .collect())
}

/// Draw one completion for `prompt_id`, token by token from each softmax row.
pub fn sample<R: Rng>(params: &PolicyParams, prompt_id: usize, rng: &mut R) -> Result<Completion> {
    if prompt_id >= params.num_prompts {
        return Err(Error::invalid_input(format!(
            "prompt_id {prompt_id} out of range [0, {})",
            params.num_prompts
        )));
    }
    let mut tokens = Vec::with_capacity(params.completion_len);
    for pos in 0..params.completion_len {
        let probs = softmax(params.row(prompt_id, pos));
        let dist = WeightedIndex::new(&probs)
            .map_err(|e| Error::invalid_input(format!("bad softmax row: {e}")))?;
        tokens.push(dist.sample(rng));
    }
    Ok(Completion { prompt_id, tokens })
}

/// Exact expected reward of one prompt under the policy, by completion
/// enumeration.
pub fn expected_reward(spec: &TaskSpec, params: &PolicyParams, prompt_id: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in crate::env::enumerate_completions(spec, prompt_id)? {
        total += log_prob(params, &c)?.exp() * crate::env::reward(spec, &c)?;
    }
    Ok(total)
}

/// Analytic score `∇ log π(c)`: at each sampled position the block receives
/// `one_hot(token) - softmax(row)`; all other blocks stay zero.
pub fn score_gradient(params: &PolicyParams, c: &Completion) -> Result<GradientVector> {
    check_completion(params, c)?;
    let mut grad = GradientVector::zeros(params.dimension());
    accumulate_score(params, c, 1.0, &mut grad);
    Ok(grad)
}

/// Add `scale * ∇ log π(token at position)` for every position of `c` into
/// `grad`. Shared by the score gradient and the surrogate gradients.
pub(crate) fn accumulate_score(
    params: &PolicyParams,
    c: &Completion,
    scale: f64,
    grad: &mut GradientVector,
) {
    for (pos, &tok) in c.tokens.iter().enumerate() {
        accumulate_position_score(params, c.prompt_id, pos, tok, scale, grad);
    }
}

/// Add `scale * ∇ log π(token | prompt, position)` into `grad`.
pub(crate) fn accumulate_position_score(
    params: &PolicyParams,
    prompt_id: usize,
    position: usize,
    token: usize,
    scale: f64,
    grad: &mut GradientVector,
) {
    let probs = softmax(params.row(prompt_id, position));
    let off = params.block_offset(prompt_id, position);
    let slice = &mut grad.as_mut_slice()[off..off + params.vocab_size];
    for (v, p) in probs.iter().enumerate() {
        slice[v] -= scale * p;
    }
    slice[token] += scale;
}
