//! Synthetic prompt/reward tasks with exactly enumerable completion spaces.
//!
//! A task is a fixed set of prompts, each with a target token sequence. The
//! reward for a completion is the fraction of positions matching the target,
//! so rewards are deterministic, bounded in `[0, 1]`, and have within-group
//! variance even on tiny vocabularies. Because `vocab_size^completion_len`
//! is small, every expectation over the sampling policy can be computed in
//! closed form by enumeration.

use crate::error::{Error, Result};

/// Default cap on `vocab_size^completion_len` for enumerable tasks.
pub const DEFAULT_ENUMERATION_CAP: usize = 10_000;

/// A synthetic task: prompts, per-prompt lengths (used by the packer), and
/// per-prompt target sequences (used by the reward).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub num_prompts: usize,
    pub vocab_size: usize,
    /// Tokens per completion.
    pub completion_len: usize,
    /// Token count of each prompt, indexed by prompt id.
    pub prompt_lengths: Vec<usize>,
    /// Target tokens per prompt; rewards count positionwise matches.
    pub target_map: Vec<Vec<usize>>,
    /// Whether full completion enumeration is permitted.
    pub enumerable: bool,
    /// Cap on the enumeration size when `enumerable` is set.
    pub enumeration_cap: usize,
}

impl TaskSpec {
    /// The desk-scale default: 8 prompts, vocabulary 3, completions of
    /// length 2 (9 completions per prompt), mixed prompt lengths.
    pub fn desk_default() -> Self {
        let num_prompts = 8;
        let vocab_size = 3;
        let completion_len = 2;
        let target_map = (0..num_prompts)
            .map(|p| (0..completion_len).map(|t| (p + t) % vocab_size).collect())
            .collect();
        TaskSpec {
            num_prompts,
            vocab_size,
            completion_len,
            prompt_lengths: vec![4, 2, 3, 5, 2, 4, 3, 1],
            target_map,
            enumerable: true,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_prompts == 0 {
            return Err(Error::invalid_input("task.num_prompts must be >= 1"));
        }
        if self.vocab_size == 0 {
            return Err(Error::invalid_input("task.vocab_size must be >= 1"));
        }
        if self.completion_len == 0 {
            return Err(Error::invalid_input("task.completion_len must be >= 1"));
        }
        if self.prompt_lengths.len() != self.num_prompts {
            return Err(Error::invalid_input(format!(
                "task.prompt_lengths must have exactly {} entries (got {})",
                self.num_prompts,
                self.prompt_lengths.len()
            )));
        }
        if let Some(bad) = self.prompt_lengths.iter().position(|&l| l == 0) {
            return Err(Error::invalid_input(format!(
                "task.prompt_lengths[{bad}] must be >= 1"
            )));
        }
        if self.target_map.len() != self.num_prompts {
            return Err(Error::invalid_input(format!(
                "task.target_map must have exactly {} entries (got {})",
                self.num_prompts,
                self.target_map.len()
            )));
        }
        for (p, target) in self.target_map.iter().enumerate() {
            if target.len() != self.completion_len {
                return Err(Error::invalid_input(format!(
                    "task.target_map[{p}] must have length {} (got {})",
                    self.completion_len,
                    target.len()
                )));
            }
            if let Some(&tok) = target.iter().find(|&&tok| tok >= self.vocab_size) {
                return Err(Error::invalid_input(format!(
                    "task.target_map[{p}] token {tok} out of range [0, {})",
                    self.vocab_size
                )));
            }
        }
        if self.enumerable && self.enumeration_size().is_none() {
            return Err(Error::Capacity(format!(
                "enumerable task needs vocab_size^completion_len <= {} \
                 ({}^{} exceeds it)",
                self.enumeration_cap, self.vocab_size, self.completion_len
            )));
        }
        Ok(())
    }

    /// `vocab_size^completion_len` when it fits under the cap.
    pub fn enumeration_size(&self) -> Option<usize> {
        let mut total: usize = 1;
        for _ in 0..self.completion_len {
            total = total.checked_mul(self.vocab_size)?;
            if total > self.enumeration_cap {
                return None;
            }
        }
        Some(total)
    }

    pub fn check_prompt_id(&self, prompt_id: usize) -> Result<()> {
        if prompt_id >= self.num_prompts {
            return Err(Error::invalid_input(format!(
                "prompt_id {prompt_id} out of range [0, {})",
                self.num_prompts
            )));
        }
        Ok(())
    }
}

/// One completion for one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub prompt_id: usize,
    pub tokens: Vec<usize>,
}

impl Completion {
    pub fn validate(&self, spec: &TaskSpec) -> Result<()> {
        spec.check_prompt_id(self.prompt_id)?;
        if self.tokens.len() != spec.completion_len {
            return Err(Error::invalid_input(format!(
                "completion has {} tokens, expected {}",
                self.tokens.len(),
                spec.completion_len
            )));
        }
        if let Some(&tok) = self.tokens.iter().find(|&&tok| tok >= spec.vocab_size) {
            return Err(Error::invalid_input(format!(
                "token {tok} out of range [0, {})",
                spec.vocab_size
            )));
        }
        Ok(())
    }
}

/// Fraction of positions where the completion matches the prompt's target.
/// Deterministic and in `[0, 1]`.
pub fn reward(spec: &TaskSpec, c: &Completion) -> Result<f64> {
    c.validate(spec)?;
    let target = &spec.target_map[c.prompt_id];
    let matches = c
        .tokens
        .iter()
        .zip(target.iter())
        .filter(|(a, b)| a == b)
        .count();
    Ok(matches as f64 / spec.completion_len as f64)
}

/// All `vocab_size^completion_len` completions for a prompt in lexicographic
/// token order.
pub fn enumerate_completions(spec: &TaskSpec, prompt_id: usize) -> Result<Vec<Completion>> {
    spec.check_prompt_id(prompt_id)?;
    let total = spec.enumeration_size().ok_or_else(|| {
        Error::Capacity(format!(
            "enumeration size {}^{} exceeds cap {}",
            spec.vocab_size, spec.completion_len, spec.enumeration_cap
        ))
    })?;
    let mut out = Vec::with_capacity(total);
    let mut tokens = vec![0usize; spec.completion_len];
    loop {
        out.push(Completion {
            prompt_id,
            tokens: tokens.clone(),
        });
        // Odometer increment, most significant position first.
        let mut pos = spec.completion_len;
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            tokens[pos] += 1;
            if tokens[pos] < spec.vocab_size {
                break;
            }
            tokens[pos] = 0;
        }
    }
}
