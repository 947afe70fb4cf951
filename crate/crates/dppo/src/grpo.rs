//! Group-relative policy optimization math: group-normalized advantages,
//! probability ratios, the clipped surrogate, the per-token KL penalty, and
//! the core gradient kernel `psi = ratio * advantage * score`.

use rand::Rng;

use crate::env::{self, Completion, TaskSpec};
use crate::error::{Error, Result};
use crate::policy::{self, GradientVector, PolicyParams};

/// Below this population std a group's rewards count as constant and its
/// advantages are zeroed, so the group contributes no gradient.
pub const STD_FLOOR: f64 = 1e-12;

/// One prompt's rollout group: `G` completions with rewards, normalized
/// advantages, and behavior-policy log-probabilities.
#[derive(Debug, Clone)]
pub struct Group {
    pub prompt_id: usize,
    pub completions: Vec<Completion>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Sequence log-probability under the behavior policy, per completion.
    pub old_log_probs: Vec<f64>,
    /// Per-position log-probabilities under the behavior policy; needed for
    /// the token-level ratio form.
    pub old_token_log_probs: Vec<Vec<f64>>,
}

impl Group {
    /// Sample `group_size` completions from the behavior policy and fill in
    /// rewards, advantages, and old log-probs.
    pub fn rollout<R: Rng>(
        spec: &TaskSpec,
        params_old: &PolicyParams,
        prompt_id: usize,
        group_size: usize,
        rng: &mut R,
    ) -> Result<Group> {
        let completions: Vec<Completion> = (0..group_size)
            .map(|_| policy::sample(params_old, prompt_id, rng))
            .collect::<Result<_>>()?;
        Group::from_completions(spec, params_old, prompt_id, completions)
    }

    /// Build a group from already-sampled completions.
    pub fn from_completions(
        spec: &TaskSpec,
        params_old: &PolicyParams,
        prompt_id: usize,
        completions: Vec<Completion>,
    ) -> Result<Group> {
        let rewards: Vec<f64> = completions
            .iter()
            .map(|c| env::reward(spec, c))
            .collect::<Result<_>>()?;
        let advantages = compute_advantages(&rewards)?;
        let old_log_probs: Vec<f64> = completions
            .iter()
            .map(|c| policy::log_prob(params_old, c))
            .collect::<Result<_>>()?;
        let old_token_log_probs: Vec<Vec<f64>> = completions
            .iter()
            .map(|c| policy::token_log_probs(params_old, c))
            .collect::<Result<_>>()?;
        Ok(Group {
            prompt_id,
            completions,
            rewards,
            advantages,
            old_log_probs,
            old_token_log_probs,
        })
    }

    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }

    /// Borrowed view of one completion with its advantage and old log-probs.
    pub fn entry(&self, i: usize) -> GroupEntry<'_> {
        GroupEntry {
            completion: &self.completions[i],
            advantage: self.advantages[i],
            old_log_prob: self.old_log_probs[i],
            old_token_log_probs: &self.old_token_log_probs[i],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.completions.len();
        if g < 2 {
            return Err(Error::InvalidGroup(format!(
                "group needs at least 2 completions (got {g})"
            )));
        }
        if self.rewards.len() != g
            || self.advantages.len() != g
            || self.old_log_probs.len() != g
            || self.old_token_log_probs.len() != g
        {
            return Err(Error::InvalidGroup(
                "group field lengths disagree".to_string(),
            ));
        }
        Ok(())
    }
}

/// One completion of a group plus the scalars the gradient kernel needs.
#[derive(Debug, Clone, Copy)]
pub struct GroupEntry<'a> {
    pub completion: &'a Completion,
    pub advantage: f64,
    pub old_log_prob: f64,
    pub old_token_log_probs: &'a [f64],
}

/// Surrogate-objective switches: clip range, KL weight, and whether the
/// ratio is applied per sequence or per token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub use_clip: bool,
    pub token_level: bool,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            clip_epsilon: 0.2,
            kl_beta: 0.0,
            use_clip: false,
            token_level: false,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.clip_epsilon) {
            return Err(Error::invalid_input(format!(
                "invariant 0 <= clip_epsilon < 1 violated (got {})",
                self.clip_epsilon
            )));
        }
        if self.kl_beta < 0.0 {
            return Err(Error::invalid_input(format!(
                "invariant kl_beta >= 0 violated (got {})",
                self.kl_beta
            )));
        }
        Ok(())
    }
}

/// Group-normalized advantages: `(r_i - mean) / std` with population std.
/// A constant-reward group gets all-zero advantages.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidGroup(format!(
            "advantage normalization needs at least 2 rewards (got {})",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Importance ratio `pi_new(c) / pi_old(c)` from the stored old log-prob.
pub fn ratio(params_new: &PolicyParams, old_log_prob: f64, c: &Completion) -> Result<f64> {
    if !old_log_prob.is_finite() {
        return Err(Error::invalid_input("old_log_prob must be finite"));
    }
    Ok((policy::log_prob(params_new, c)? - old_log_prob).exp())
}

/// PPO-style pessimistic surrogate: `min(rho*A, clip(rho, 1-eps, 1+eps)*A)`
/// when clipping is enabled, plain `rho*A` otherwise.
pub fn clipped_surrogate(rho: f64, advantage: f64, cfg: &SurrogateConfig) -> f64 {
    if !cfg.use_clip {
        return rho * advantage;
    }
    let clipped = rho.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    (rho * advantage).min(clipped * advantage)
}

/// Whether the pessimistic min saturates the clip: in that regime the
/// surrogate is constant in the parameters and contributes zero gradient.
fn clip_saturated(rho: f64, advantage: f64, cfg: &SurrogateConfig) -> bool {
    cfg.use_clip
        && ((advantage > 0.0 && rho > 1.0 + cfg.clip_epsilon)
            || (advantage < 0.0 && rho < 1.0 - cfg.clip_epsilon))
}

/// Per-token KL penalty `rho_hat - ln(rho_hat) - 1` with
/// `rho_hat = pi_ref / pi_theta`. Nonnegative; zero iff the probabilities match.
pub fn kl_token(pi_ref_prob: f64, pi_theta_prob: f64) -> Result<f64> {
    if pi_ref_prob <= 0.0 || pi_theta_prob <= 0.0 {
        return Err(Error::invalid_input(format!(
            "kl_token needs positive probabilities (got {pi_ref_prob}, {pi_theta_prob})"
        )));
    }
    let rho_hat = pi_ref_prob / pi_theta_prob;
    Ok(rho_hat - rho_hat.ln() - 1.0)
}

/// The core gradient kernel `psi = ratio * advantage * ∇ log pi(c)` in its
/// unclipped sequence-level form.
pub fn psi(params_new: &PolicyParams, entry: &GroupEntry<'_>) -> Result<GradientVector> {
    surrogate_gradient(params_new, entry, &SurrogateConfig::default())
}

/// Gradient of the (optionally clipped, optionally token-level) surrogate
/// for one completion. The token-level form weights every position by
/// `1/|o|` and uses per-position ratios; the sequence form uses the whole
/// completion's ratio once.
pub fn surrogate_gradient(
    params_new: &PolicyParams,
    entry: &GroupEntry<'_>,
    cfg: &SurrogateConfig,
) -> Result<GradientVector> {
    if !entry.advantage.is_finite() {
        return Err(Error::invalid_input("advantage must be finite"));
    }
    if !entry.old_log_prob.is_finite() {
        return Err(Error::invalid_input("old_log_prob must be finite"));
    }
    let mut grad = GradientVector::zeros(params_new.dimension());
    let c = entry.completion;
    if cfg.token_level {
        if entry.old_token_log_probs.len() != c.tokens.len() {
            return Err(Error::invalid_input(
                "old_token_log_probs length must match the completion",
            ));
        }
        let new_token_lps = policy::token_log_probs(params_new, c)?;
        let token_weight = 1.0 / c.tokens.len() as f64;
        for (pos, &tok) in c.tokens.iter().enumerate() {
            let rho_t = (new_token_lps[pos] - entry.old_token_log_probs[pos]).exp();
            if clip_saturated(rho_t, entry.advantage, cfg) {
                continue;
            }
            let scale = token_weight * rho_t * entry.advantage;
            policy::accumulate_position_score(params_new, c.prompt_id, pos, tok, scale, &mut grad);
        }
    } else {
        let rho = ratio(params_new, entry.old_log_prob, c)?;
        if !clip_saturated(rho, entry.advantage, cfg) {
            policy::accumulate_score(params_new, c, rho * entry.advantage, &mut grad);
        }
    }
    Ok(grad)
}

/// Surrogate value (not gradient) for one completion under `cfg`; used for
/// the logged policy-gradient loss.
pub fn surrogate_value(
    params_new: &PolicyParams,
    entry: &GroupEntry<'_>,
    cfg: &SurrogateConfig,
) -> Result<f64> {
    let c = entry.completion;
    if cfg.token_level {
        let new_token_lps = policy::token_log_probs(params_new, c)?;
        let token_weight = 1.0 / c.tokens.len() as f64;
        let mut total = 0.0;
        for (new_lp, old_lp) in new_token_lps.iter().zip(entry.old_token_log_probs) {
            let rho_t = (new_lp - old_lp).exp();
            total += token_weight * clipped_surrogate(rho_t, entry.advantage, cfg);
        }
        Ok(total)
    } else {
        let rho = ratio(params_new, entry.old_log_prob, c)?;
        Ok(clipped_surrogate(rho, entry.advantage, cfg))
    }
}

/// Mean per-token KL penalty of a completion against the reference policy.
pub fn completion_kl(
    params_theta: &PolicyParams,
    params_ref: &PolicyParams,
    c: &Completion,
) -> Result<f64> {
    let theta_lps = policy::token_log_probs(params_theta, c)?;
    let ref_lps = policy::token_log_probs(params_ref, c)?;
    let mut total = 0.0;
    for (lp_theta, lp_ref) in theta_lps.iter().zip(ref_lps.iter()) {
        total += kl_token(lp_ref.exp(), lp_theta.exp())?;
    }
    Ok(total / c.tokens.len() as f64)
}

/// Gradient of `-beta * KL` for one completion (the ascent direction of the
/// KL-penalized objective). Per token: `beta * (rho_hat - 1) * ∇ log pi`.
pub fn kl_penalty_gradient(
    params_theta: &PolicyParams,
    params_ref: &PolicyParams,
    c: &Completion,
    beta: f64,
    token_level: bool,
) -> Result<GradientVector> {
    let mut grad = GradientVector::zeros(params_theta.dimension());
    if beta == 0.0 {
        return Ok(grad);
    }
    let theta_lps = policy::token_log_probs(params_theta, c)?;
    let ref_lps = policy::token_log_probs(params_ref, c)?;
    let token_weight = if token_level {
        1.0 / c.tokens.len() as f64
    } else {
        1.0
    };
    for (pos, &tok) in c.tokens.iter().enumerate() {
        let rho_hat = (ref_lps[pos] - theta_lps[pos]).exp();
        let scale = beta * token_weight * (rho_hat - 1.0);
        policy::accumulate_position_score(params_theta, c.prompt_id, pos, tok, scale, &mut grad);
    }
    Ok(grad)
}
