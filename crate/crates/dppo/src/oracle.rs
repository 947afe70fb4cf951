//! Independent brute-force verifiers.
//!
//! Three families of checks, all exact up to floating-point accumulation:
//!
//! * **Plan enumeration**: every keep/drop outcome of the pruning mechanism
//!   is listed with its exact probability and the weighted estimator is
//!   averaged over them; the result must equal the unpruned batch gradient.
//!   Groups prune independently, so the hierarchical expectation enumerates
//!   completion plans exhaustively per group and prompt plans exhaustively
//!   over the batch, composing the two by linearity.
//! * **Distributional variance analysis**: with the completion space
//!   enumerable, the single-draw estimator `gamma(q) gamma(o,q) Psi(q,o)`
//!   has computable per-level variances; Monte-Carlo trials of the same
//!   estimator are compared against the closed-form total-variance bound.
//! * **Finite differences**: analytic gradients against central differences
//!   of enumerated scalar objectives.

use std::collections::BTreeSet;

use itertools::Itertools;
use rand::distributions::{Distribution, WeightedIndex};
use serde::Serialize;

use crate::env::{self, Completion, TaskSpec};
use crate::error::{Error, Result};
use crate::grpo::{self, Group, GroupEntry};
use crate::policy::{self, GradientVector, PolicyParams};
use crate::pruning::{self, floor_fraction, LevelMechanics, LevelPlan, PruneMode, PruningConfig};
use crate::rng;

/// Refuse plan enumerations larger than this.
pub const DEFAULT_PLAN_CAP: u64 = 1_000_000;

/// Which pruning level an unbiasedness check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneLevel {
    Completion,
    Prompt,
    Hierarchical,
}

/// Result of one exact unbiasedness check.
#[derive(Debug, Clone, Serialize)]
pub struct UnbiasednessReport {
    pub max_abs_deviation: f64,
    pub num_plans_enumerated: u64,
    pub mode: PruneMode,
    pub level: PruneLevel,
}

/// `(1/|S|) sum over kept items of weight_i * value_i`; zero when the plan
/// keeps nothing (the trainer skips such batches).
fn level_estimator(plan: &LevelPlan, values: &[GradientVector], dim: usize) -> GradientVector {
    let kept = plan.kept_count();
    let mut acc = GradientVector::zeros(dim);
    for (i, value) in values.iter().enumerate() {
        if plan.keep[i] {
            acc.add_scaled(value, plan.weight[i]);
        }
    }
    if kept > 0 {
        acc.scale(1.0 / kept as f64);
    }
    acc
}

fn binomial(n: usize, k: usize) -> u128 {
    let mut out: u128 = 1;
    for i in 0..k {
        out = out * (n - i) as u128 / (i + 1) as u128;
    }
    out
}

/// Expectation of the level estimator over every plan of the mechanism.
fn enumerate_level(
    mech: &LevelMechanics,
    values: &[GradientVector],
    dim: usize,
    cap: u64,
) -> Result<(GradientVector, u64)> {
    if mech.rate == 0.0 || mech.candidates.is_empty() {
        let plan = mech.plan_from_dropped(&vec![false; mech.n]);
        return Ok((level_estimator(&plan, values, dim), 1));
    }
    let nc = mech.candidates.len();
    let mut expectation = GradientVector::zeros(dim);
    let mut plans: u64 = 0;
    match mech.mode {
        PruneMode::Bernoulli => {
            if nc >= 63 || (1u128 << nc) > cap as u128 {
                return Err(Error::Capacity(format!(
                    "2^{nc} bernoulli patterns exceed the plan cap {cap}"
                )));
            }
            let rate = mech.rate;
            for pattern in 0u64..(1 << nc) {
                let mut dropped = vec![false; mech.n];
                let mut ndrop = 0i32;
                for (bit, &idx) in mech.candidates.iter().enumerate() {
                    if pattern >> bit & 1 == 1 {
                        dropped[idx] = true;
                        ndrop += 1;
                    }
                }
                let prob = rate.powi(ndrop) * (1.0 - rate).powi(nc as i32 - ndrop);
                let empties_group = mech.resurrect && ndrop as usize == nc && nc == mech.n;
                if empties_group {
                    // The all-dropped pattern branches into the uniform
                    // resurrection outcomes.
                    for &res in &mech.candidates {
                        let mut d = dropped.clone();
                        d[res] = false;
                        let plan = mech.plan_from_dropped(&d);
                        expectation
                            .add_scaled(&level_estimator(&plan, values, dim), prob / nc as f64);
                        plans += 1;
                    }
                } else {
                    let plan = mech.plan_from_dropped(&dropped);
                    expectation.add_scaled(&level_estimator(&plan, values, dim), prob);
                    plans += 1;
                }
            }
        }
        PruneMode::DeterministicFraction => {
            let m = mech.drop_quota.expect("deterministic mode carries a quota");
            let count = binomial(nc, m);
            if count > cap as u128 {
                return Err(Error::Capacity(format!(
                    "C({nc},{m}) = {count} subsets exceed the plan cap {cap}"
                )));
            }
            if m == 0 {
                let plan = mech.plan_from_dropped(&vec![false; mech.n]);
                return Ok((level_estimator(&plan, values, dim), 1));
            }
            let prob = 1.0 / count as f64;
            for subset in mech.candidates.iter().copied().combinations(m) {
                let mut dropped = vec![false; mech.n];
                for idx in subset {
                    dropped[idx] = true;
                }
                let plan = mech.plan_from_dropped(&dropped);
                expectation.add_scaled(&level_estimator(&plan, values, dim), prob);
                plans += 1;
            }
        }
    }
    Ok((expectation, plans))
}

/// Enumerate every pruning plan at the requested level(s) and compare the
/// expected weighted estimator against the unpruned batch gradient computed
/// on the same groups.
pub fn exact_unbiasedness(
    groups: &[Group],
    prompt_candidates: &BTreeSet<usize>,
    params_new: &PolicyParams,
    cfg: &PruningConfig,
    level: PruneLevel,
    cap: u64,
) -> Result<UnbiasednessReport> {
    if groups.is_empty() {
        return Err(Error::invalid_input("need at least one group"));
    }
    cfg.validate()?;
    let dim = params_new.dimension();
    let r_o = match level {
        PruneLevel::Completion | PruneLevel::Hierarchical => cfg.r_o,
        PruneLevel::Prompt => 0.0,
    };
    let r_q = match level {
        PruneLevel::Prompt | PruneLevel::Hierarchical => cfg.r_q,
        PruneLevel::Completion => 0.0,
    };
    let eff = PruningConfig { r_o, r_q, ..*cfg };

    let psis: Vec<Vec<GradientVector>> = groups
        .iter()
        .map(|g| {
            (0..g.len())
                .map(|i| grpo::psi(params_new, &g.entry(i)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut total_plans: u64 = 0;
    let mut inner_expect = Vec::with_capacity(groups.len());
    let mut inner_unpruned = Vec::with_capacity(groups.len());
    for (g, group) in groups.iter().enumerate() {
        let identity = LevelPlan::identity(group.len());
        inner_unpruned.push(level_estimator(&identity, &psis[g], dim));
        let mech = pruning::completion_mechanics(&group.advantages, &eff)?;
        let (expect, plans) = enumerate_level(&mech, &psis[g], dim, cap)?;
        total_plans = total_plans.saturating_add(plans);
        if total_plans > cap {
            return Err(Error::Capacity(format!(
                "total enumerated plans exceed the cap {cap}"
            )));
        }
        inner_expect.push(expect);
    }

    let batch: Vec<usize> = groups.iter().map(|g| g.prompt_id).collect();
    let outer_identity = LevelPlan::identity(groups.len());
    let target = level_estimator(&outer_identity, &inner_unpruned, dim);

    let mech = pruning::prompt_mechanics(&batch, prompt_candidates, &eff);
    let (estimate, outer_plans) = enumerate_level(&mech, &inner_expect, dim, cap)?;
    total_plans = total_plans.saturating_add(outer_plans);
    if total_plans > cap {
        return Err(Error::Capacity(format!(
            "total enumerated plans exceed the cap {cap}"
        )));
    }

    Ok(UnbiasednessReport {
        max_abs_deviation: estimate.max_abs_diff(&target),
        num_plans_enumerated: total_plans,
        mode: cfg.mode,
        level,
    })
}

/// The closed-form prompt-level variance inflation factor
/// `(1 - beta r_q)(1 - (1 - beta) r_q) / (1 - r_q)`.
pub fn variance_factor(beta: f64, r_q: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&r_q) {
        return Err(Error::invalid_input(format!(
            "invariant r_q < 1 violated (got {r_q})"
        )));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::invalid_input(format!(
            "invariant beta in (0, 1] violated (got {beta})"
        )));
    }
    Ok((1.0 - beta * r_q) * (1.0 - (1.0 - beta) * r_q) / (1.0 - r_q))
}

fn squared_norm(v: &GradientVector) -> f64 {
    v.as_slice().iter().map(|x| x * x).sum()
}

/// Per-prompt enumerated quantities of the single-draw analysis.
#[derive(Debug, Clone)]
struct PromptDist {
    completions: Vec<Completion>,
    /// `pi_old(o | q)` and its log.
    probs_old: Vec<f64>,
    log_probs_old: Vec<f64>,
    /// Population-normalized advantages: a fixed function of `(q, o)`.
    advantages: Vec<f64>,
    /// Mean absolute advantage under `pi_old`; the candidacy threshold.
    threshold: f64,
    candidate: Vec<bool>,
    /// `pi_tilde(o | q)`.
    probs_pruned: Vec<f64>,
    /// `gamma(o, q) = c_o / (1 - P^o(o))`.
    gamma_o: Vec<f64>,
}

/// The enumerated task under a pruning configuration: pruned distributions,
/// rescaling factors, and the bottom-score prompt candidate set, all in the
/// distributional (single-draw) model where the advantage is a function of
/// `(q, o)` under the behavior policy.
#[derive(Debug, Clone)]
pub struct DistOracle {
    dim: usize,
    r_o: f64,
    r_q: f64,
    prompts: Vec<PromptDist>,
    /// Prompt is in the bottom-beta candidate set.
    bottom: Vec<bool>,
    /// `P_tilde(q)`.
    prompt_probs_pruned: Vec<f64>,
    /// `gamma(q) = c_q / (1 - P^q(q))`.
    gamma_q: Vec<f64>,
}

/// Low-score-smaller-gradient condition checks, per level.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub completion_ok: Vec<bool>,
    pub prompt_ok: bool,
}

impl ConditionReport {
    pub fn all_ok(&self) -> bool {
        self.prompt_ok && self.completion_ok.iter().all(|&b| b)
    }
}

impl DistOracle {
    pub fn new(spec: &TaskSpec, params_old: &PolicyParams, cfg: &PruningConfig) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        let mut prompts = Vec::with_capacity(spec.num_prompts);
        for q in 0..spec.num_prompts {
            let completions = env::enumerate_completions(spec, q)?;
            let log_probs_old: Vec<f64> = completions
                .iter()
                .map(|c| policy::log_prob(params_old, c))
                .collect::<Result<_>>()?;
            let probs_old: Vec<f64> = log_probs_old.iter().map(|lp| lp.exp()).collect();
            let rewards: Vec<f64> = completions
                .iter()
                .map(|c| env::reward(spec, c))
                .collect::<Result<_>>()?;
            let mean: f64 = probs_old.iter().zip(&rewards).map(|(p, r)| p * r).sum();
            let var: f64 = probs_old
                .iter()
                .zip(&rewards)
                .map(|(p, r)| p * (r - mean) * (r - mean))
                .sum();
            let std = var.sqrt();
            let advantages: Vec<f64> = if std < grpo::STD_FLOOR {
                vec![0.0; rewards.len()]
            } else {
                rewards.iter().map(|r| (r - mean) / std).collect()
            };
            let threshold: f64 = probs_old
                .iter()
                .zip(&advantages)
                .map(|(p, a)| p * a.abs())
                .sum();
            let candidate: Vec<bool> = advantages.iter().map(|a| a.abs() <= threshold).collect();
            let cand_mass: f64 = probs_old
                .iter()
                .zip(&candidate)
                .filter(|(_, &c)| c)
                .map(|(p, _)| p)
                .sum();
            let c_o = 1.0 - cfg.r_o * cand_mass;
            let gamma_o: Vec<f64> = candidate
                .iter()
                .map(|&c| c_o / if c { 1.0 - cfg.r_o } else { 1.0 })
                .collect();
            let probs_pruned: Vec<f64> = probs_old
                .iter()
                .zip(&candidate)
                .map(|(p, &c)| p * if c { 1.0 - cfg.r_o } else { 1.0 } / c_o)
                .collect();
            prompts.push(PromptDist {
                completions,
                probs_old,
                log_probs_old,
                advantages,
                threshold,
                candidate,
                probs_pruned,
                gamma_o,
            });
        }

        // Bottom-beta prompts by difficulty (threshold) ascending, ties by id.
        let n = spec.num_prompts;
        let k = floor_fraction(cfg.beta, n);
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.sort_by(|&a, &b| {
            prompts[a]
                .threshold
                .partial_cmp(&prompts[b].threshold)
                .expect("thresholds are finite")
                .then(a.cmp(&b))
        });
        let mut bottom = vec![false; n];
        for &q in ranked.iter().take(k) {
            bottom[q] = true;
        }
        let c_q = 1.0 - cfg.r_q * k as f64 / n as f64;
        let gamma_q: Vec<f64> = bottom
            .iter()
            .map(|&b| c_q / if b { 1.0 - cfg.r_q } else { 1.0 })
            .collect();
        let prompt_probs_pruned: Vec<f64> = bottom
            .iter()
            .map(|&b| (if b { 1.0 - cfg.r_q } else { 1.0 }) / (n as f64) / c_q)
            .collect();

        Ok(DistOracle {
            dim: params_old.dimension(),
            r_o: cfg.r_o,
            r_q: cfg.r_q,
            prompts,
            bottom,
            prompt_probs_pruned,
            gamma_q,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn bottom_set(&self) -> &[bool] {
        &self.bottom
    }

    /// `Psi(q, o) = ratio * A(q, o) * score` for every completion, at the
    /// given current parameters.
    pub fn psi_vectors(&self, params_new: &PolicyParams) -> Result<Vec<Vec<GradientVector>>> {
        self.prompts
            .iter()
            .map(|p| {
                p.completions
                    .iter()
                    .enumerate()
                    .map(|(o, c)| {
                        let rho = (policy::log_prob(params_new, c)? - p.log_probs_old[o]).exp();
                        let mut g = policy::score_gradient(params_new, c)?;
                        g.scale(rho * p.advantages[o]);
                        Ok(g)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    /// `G(q) = E_{o ~ pi_old}[Psi(q, o)]` for every prompt.
    pub fn per_prompt_gradients(&self, psis: &[Vec<GradientVector>]) -> Vec<GradientVector> {
        self.prompts
            .iter()
            .zip(psis)
            .map(|(p, psi_q)| {
                let mut g = GradientVector::zeros(self.dim);
                for (o, psi) in psi_q.iter().enumerate() {
                    g.add_scaled(psi, p.probs_old[o]);
                }
                g
            })
            .collect()
    }

    /// The exact full gradient `(1/|Q|) sum_q G(q)`.
    pub fn mean_gradient(&self, params_new: &PolicyParams) -> Result<GradientVector> {
        let psis = self.psi_vectors(params_new)?;
        let per_prompt = self.per_prompt_gradients(&psis);
        let mut mean = GradientVector::zeros(self.dim);
        for g in &per_prompt {
            mean.add_scaled(g, 1.0 / per_prompt.len() as f64);
        }
        Ok(mean)
    }

    /// The expected surrogate `J(theta) = (1/|Q|) sum_q E_{o~pi_old}[rho A]`.
    pub fn surrogate_objective(&self, params_new: &PolicyParams) -> Result<f64> {
        let mut total = 0.0;
        for p in &self.prompts {
            for (o, c) in p.completions.iter().enumerate() {
                let rho = (policy::log_prob(params_new, c)? - p.log_probs_old[o]).exp();
                total += p.probs_old[o] * rho * p.advantages[o];
            }
        }
        Ok(total / self.prompts.len() as f64)
    }

    /// The same objective expressed through the pruned distributions with
    /// rescaling factors; unbiasedness makes it identical to
    /// [`DistOracle::surrogate_objective`] at every parameter point.
    pub fn pruned_objective(&self, params_new: &PolicyParams) -> Result<f64> {
        let mut total = 0.0;
        for (q, p) in self.prompts.iter().enumerate() {
            let mut inner = 0.0;
            for (o, c) in p.completions.iter().enumerate() {
                let rho = (policy::log_prob(params_new, c)? - p.log_probs_old[o]).exp();
                inner += p.probs_pruned[o] * p.gamma_o[o] * rho * p.advantages[o];
            }
            total += self.prompt_probs_pruned[q] * self.gamma_q[q] * inner;
        }
        Ok(total)
    }

    /// Trace variance of `gamma(o,q) Psi` under the pruned completion
    /// distribution, against the unpruned `Var_O[Psi]`, for one prompt.
    pub fn completion_variance(
        &self,
        params_new: &PolicyParams,
        prompt_id: usize,
    ) -> Result<(f64, f64)> {
        let psis = self.psi_vectors(params_new)?;
        let p = &self.prompts[prompt_id];
        let psi_q = &psis[prompt_id];

        let mut mean_pruned = GradientVector::zeros(self.dim);
        let mut second_pruned = 0.0;
        let mut mean_full = GradientVector::zeros(self.dim);
        let mut second_full = 0.0;
        for (o, psi) in psi_q.iter().enumerate() {
            let sq = squared_norm(psi);
            mean_pruned.add_scaled(psi, p.probs_pruned[o] * p.gamma_o[o]);
            second_pruned += p.probs_pruned[o] * p.gamma_o[o] * p.gamma_o[o] * sq;
            mean_full.add_scaled(psi, p.probs_old[o]);
            second_full += p.probs_old[o] * sq;
        }
        Ok((
            second_pruned - squared_norm(&mean_pruned),
            second_full - squared_norm(&mean_full),
        ))
    }

    /// Trace variance of `gamma(q) G(q)` under the pruned prompt
    /// distribution, against the unpruned `Var_Q[G(q)]`.
    pub fn prompt_variance(&self, params_new: &PolicyParams) -> Result<(f64, f64)> {
        let psis = self.psi_vectors(params_new)?;
        let per_prompt = self.per_prompt_gradients(&psis);
        let n = per_prompt.len() as f64;

        let mut mean_pruned = GradientVector::zeros(self.dim);
        let mut second_pruned = 0.0;
        let mut mean_full = GradientVector::zeros(self.dim);
        let mut second_full = 0.0;
        for (q, g) in per_prompt.iter().enumerate() {
            let sq = squared_norm(g);
            mean_pruned.add_scaled(g, self.prompt_probs_pruned[q] * self.gamma_q[q]);
            second_pruned += self.prompt_probs_pruned[q] * self.gamma_q[q] * self.gamma_q[q] * sq;
            mean_full.add_scaled(g, 1.0 / n);
            second_full += sq / n;
        }
        Ok((
            second_pruned - squared_norm(&mean_pruned),
            second_full - squared_norm(&mean_full),
        ))
    }

    /// Check the variance-analysis conditions: candidates (the prunable
    /// items) must have rescaled squared gradients no larger than the
    /// population mean, at each level.
    pub fn check_low_score_condition(&self, params_new: &PolicyParams) -> Result<ConditionReport> {
        let psis = self.psi_vectors(params_new)?;
        let mut completion_ok = Vec::with_capacity(self.prompts.len());
        for (q, p) in self.prompts.iter().enumerate() {
            if self.r_o == 0.0 || p.candidate.iter().all(|&c| !c) {
                completion_ok.push(true);
                continue;
            }
            let cand_mass: f64 = p
                .probs_old
                .iter()
                .zip(&p.candidate)
                .filter(|(_, &c)| c)
                .map(|(pr, _)| pr)
                .sum();
            let lhs: f64 = p
                .probs_old
                .iter()
                .zip(&p.candidate)
                .zip(&psis[q])
                .filter(|((_, &c), _)| c)
                .map(|((pr, _), psi)| pr * squared_norm(psi) / (1.0 - self.r_o))
                .sum::<f64>()
                / cand_mass;
            let rhs: f64 = p
                .probs_old
                .iter()
                .zip(&psis[q])
                .map(|(pr, psi)| pr * squared_norm(psi))
                .sum();
            completion_ok.push(lhs <= rhs + 1e-12);
        }

        let per_prompt = self.per_prompt_gradients(&psis);
        let nb = self.bottom.iter().filter(|&&b| b).count();
        let prompt_ok = if self.r_q == 0.0 || nb == 0 {
            true
        } else {
            let lhs: f64 = per_prompt
                .iter()
                .zip(&self.bottom)
                .filter(|(_, &b)| b)
                .map(|(g, _)| squared_norm(g) / (1.0 - self.r_q))
                .sum::<f64>()
                / nb as f64;
            let rhs: f64 =
                per_prompt.iter().map(squared_norm).sum::<f64>() / per_prompt.len() as f64;
            lhs <= rhs + 1e-12
        };

        Ok(ConditionReport {
            completion_ok,
            prompt_ok,
        })
    }

    /// Exact `E_{q ~ P_tilde}[gamma(q)^2]`, the prompt-level inflation term.
    pub fn exact_bound_factor(&self) -> f64 {
        self.prompt_probs_pruned
            .iter()
            .zip(&self.gamma_q)
            .map(|(p, g)| p * g * g)
            .sum()
    }

    /// One Monte-Carlo draw from the pruned distributions.
    fn sample_draw(
        &self,
        prompt_dist: &WeightedIndex<f64>,
        completion_dists: &[WeightedIndex<f64>],
        rng: &mut impl rand::Rng,
    ) -> (usize, usize) {
        let q = prompt_dist.sample(rng);
        let o = completion_dists[q].sample(rng);
        (q, o)
    }
}

/// Variance summary of the hierarchical estimator against the total bound.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceReport {
    /// Monte-Carlo trace variance of the single-draw estimator.
    pub var_pruned: f64,
    /// `Var_Q[G(q)]`, exact.
    pub var_between_prompts: f64,
    /// `E_q[Var_O[Psi]]`, exact.
    pub mean_within_prompt: f64,
    /// Exact `E[gamma(q)^2]` used in the bound.
    pub bound_factor: f64,
    /// `var_between_prompts + bound_factor * mean_within_prompt`.
    pub bound_value: f64,
    /// Jackknife standard error of `var_pruned`.
    pub jackknife_se: f64,
    pub trials: usize,
    /// `var_pruned <= bound_value` within three jackknife standard errors.
    pub satisfied: bool,
}

/// Estimate the trace variance of the hierarchical single-draw estimator by
/// Monte Carlo and compare it against the exact total-variance bound.
pub fn empirical_variance(
    spec: &TaskSpec,
    params: &PolicyParams,
    cfg: &PruningConfig,
    trials: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if trials < 10_000 {
        return Err(Error::invalid_input(format!(
            "empirical_variance needs at least 10_000 trials (got {trials})"
        )));
    }
    let oracle = DistOracle::new(spec, params, cfg)?;
    let psis = oracle.psi_vectors(params)?;
    let per_prompt = oracle.per_prompt_gradients(&psis);
    let n_prompts = per_prompt.len() as f64;

    let mut grand = GradientVector::zeros(oracle.dim);
    for g in &per_prompt {
        grand.add_scaled(g, 1.0 / n_prompts);
    }
    let var_between_prompts: f64 =
        per_prompt.iter().map(squared_norm).sum::<f64>() / n_prompts - squared_norm(&grand);
    let mean_within_prompt: f64 = oracle
        .prompts
        .iter()
        .zip(&psis)
        .zip(&per_prompt)
        .map(|((p, psi_q), g)| {
            let second: f64 = p
                .probs_old
                .iter()
                .zip(psi_q)
                .map(|(pr, psi)| pr * squared_norm(psi))
                .sum();
            second - squared_norm(g)
        })
        .sum::<f64>()
        / n_prompts;
    let bound_factor = oracle.exact_bound_factor();
    let bound_value = var_between_prompts + bound_factor * mean_within_prompt;

    let prompt_dist = WeightedIndex::new(&oracle.prompt_probs_pruned)
        .map_err(|e| Error::invalid_input(format!("bad prompt distribution: {e}")))?;
    let completion_dists: Vec<WeightedIndex<f64>> = oracle
        .prompts
        .iter()
        .map(|p| {
            WeightedIndex::new(&p.probs_pruned)
                .map_err(|e| Error::invalid_input(format!("bad completion distribution: {e}")))
        })
        .collect::<Result<_>>()?;

    let dim = oracle.dim;
    let rows: Vec<Vec<f64>> = {
        use rayon::prelude::*;
        (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng::stream(seed, "variance_trial", &[t as u64]);
                let (q, o) = oracle.sample_draw(&prompt_dist, &completion_dists, &mut rng);
                let scale = oracle.gamma_q[q] * oracle.prompts[q].gamma_o[o];
                psis[q][o].as_slice().iter().map(|x| scale * x).collect()
            })
            .collect()
    };

    let n = trials as f64;
    let mut s1 = vec![0.0f64; dim];
    let mut s2 = vec![0.0f64; dim];
    for row in &rows {
        for (j, &x) in row.iter().enumerate() {
            s1[j] += x;
            s2[j] += x * x;
        }
    }
    let var_pruned: f64 = (0..dim)
        .map(|j| (s2[j] - s1[j] * s1[j] / n) / (n - 1.0))
        .sum();

    // Jackknife over trials: the trace variance recomputed with each row
    // left out, from the global sums.
    let mut jack = Vec::with_capacity(trials);
    for row in &rows {
        let mut v = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let s1j = s1[j] - x;
            let s2j = s2[j] - x * x;
            v += (s2j - s1j * s1j / (n - 1.0)) / (n - 2.0);
        }
        jack.push(v);
    }
    let jack_mean: f64 = jack.iter().sum::<f64>() / n;
    let jackknife_se: f64 = ((n - 1.0) / n
        * jack
            .iter()
            .map(|v| (v - jack_mean) * (v - jack_mean))
            .sum::<f64>())
    .sqrt();

    Ok(VarianceReport {
        var_pruned,
        var_between_prompts,
        mean_within_prompt,
        bound_factor,
        bound_value,
        jackknife_se,
        trials,
        satisfied: var_pruned <= bound_value + 3.0 * jackknife_se,
    })
}

/// Max relative componentwise error between an analytic gradient and central
/// finite differences of `objective` at `params`, normalized by the largest
/// gradient magnitude so identically-zero components cannot inflate it.
pub fn finite_diff_max_rel_error<F: Fn(&PolicyParams) -> f64>(
    spec: &TaskSpec,
    params: &PolicyParams,
    objective: F,
    analytic: &GradientVector,
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::invalid_input("step h must be > 0"));
    }
    let flat = params.flatten();
    let mut fd = vec![0.0f64; flat.len()];
    for (j, slot) in fd.iter_mut().enumerate() {
        let mut plus = flat.clone();
        plus[j] += h;
        let mut minus = flat.clone();
        minus[j] -= h;
        let f_plus = objective(&PolicyParams::from_flat(spec, plus)?);
        let f_minus = objective(&PolicyParams::from_flat(spec, minus)?);
        *slot = (f_plus - f_minus) / (2.0 * h);
    }
    let max_fd = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let denom = analytic.max_abs().max(max_fd).max(1e-12);
    let max_err = fd
        .iter()
        .zip(analytic.as_slice())
        .fold(0.0f64, |m, (f, a)| m.max((f - a).abs()));
    Ok(max_err / denom)
}

/// Exact expectation (over rollout randomness) of the unpruned batch
/// gradient with group-normalized advantages, by enumerating every ordered
/// tuple of `group_size` completions per prompt.
pub fn exact_batch_gradient(
    spec: &TaskSpec,
    params_new: &PolicyParams,
    params_old: &PolicyParams,
    group_size: usize,
    cap: u64,
) -> Result<GradientVector> {
    if group_size < 2 {
        return Err(Error::invalid_input("group_size must be >= 2"));
    }
    let dim = params_new.dimension();
    let mut total = GradientVector::zeros(dim);
    for q in 0..spec.num_prompts {
        let completions = env::enumerate_completions(spec, q)?;
        let m = completions.len();
        let tuples = (m as u128).pow(group_size as u32);
        if tuples > cap as u128 {
            return Err(Error::Capacity(format!(
                "{m}^{group_size} rollout tuples exceed the cap {cap}"
            )));
        }
        let probs: Vec<f64> = completions
            .iter()
            .map(|c| policy::log_prob(params_old, c).map(|lp| lp.exp()))
            .collect::<Result<_>>()?;
        let rewards: Vec<f64> = completions
            .iter()
            .map(|c| env::reward(spec, c))
            .collect::<Result<_>>()?;
        // ratio * score per completion, restricted to this prompt's block.
        let block = spec.completion_len * spec.vocab_size;
        let offset = q * block;
        let xs: Vec<Vec<f64>> = completions
            .iter()
            .map(|c| {
                let old_lp = policy::log_prob(params_old, c)?;
                let rho = (policy::log_prob(params_new, c)? - old_lp).exp();
                let g = policy::score_gradient(params_new, c)?;
                Ok(g.as_slice()[offset..offset + block]
                    .iter()
                    .map(|x| rho * x)
                    .collect())
            })
            .collect::<Result<_>>()?;

        let mut acc = vec![0.0f64; block];
        let mut idx = vec![0usize; group_size];
        let mut tuple_rewards = vec![0.0f64; group_size];
        loop {
            let mut prob = 1.0;
            for (i, &o) in idx.iter().enumerate() {
                prob *= probs[o];
                tuple_rewards[i] = rewards[o];
            }
            let advantages = grpo::compute_advantages(&tuple_rewards)?;
            for (i, &o) in idx.iter().enumerate() {
                if advantages[i] == 0.0 {
                    continue;
                }
                let w = prob * advantages[i] / group_size as f64;
                for (b, x) in xs[o].iter().enumerate() {
                    acc[b] += w * x;
                }
            }
            // Odometer over tuple indices.
            let mut pos = group_size;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < m {
                    break;
                }
                idx[pos] = 0;
            }
            if pos == 0 && idx[0] == 0 {
                break;
            }
        }
        let slice = &mut total.as_mut_slice()[offset..offset + block];
        for (b, v) in acc.iter().enumerate() {
            slice[b] += v / spec.num_prompts as f64;
        }
    }
    Ok(total)
}

/// An instance whose pruning candidates provably carry small gradients: the
/// first half of the prompts is strongly concentrated on its targets (tiny
/// score gradients, low difficulty score) and the second half moderately so.
/// Satisfies the low-score-smaller-gradient conditions at both levels for
/// rates up to 0.9 with beta = 0.5.
pub fn variance_test_instance() -> (TaskSpec, PolicyParams) {
    let spec = TaskSpec::desk_default();
    let mut params = PolicyParams::zeros(&spec);
    for p in 0..spec.num_prompts {
        // Softmax mass on the target token: 1998/(1998+2) = 0.999 for the
        // concentrated half, 18/(18+2) = 0.9 for the rest.
        let delta = if p < spec.num_prompts / 2 {
            1998.0f64.ln()
        } else {
            18.0f64.ln()
        };
        for t in 0..spec.completion_len {
            *params.logit_mut(p, t, spec.target_map[p][t]) = delta;
        }
    }
    (spec, params)
}

/// Sampled groups plus a prompt-candidate set for unbiasedness checks: the
/// behavior policy and a slightly shifted current policy are derived from
/// the seed, groups are rolled out once, and the candidate set is the
/// bottom-beta half by each group's mean absolute advantage.
pub fn sampled_batch_for_checks(
    spec: &TaskSpec,
    group_size: usize,
    beta: f64,
    seed: u64,
) -> Result<(Vec<Group>, BTreeSet<usize>, PolicyParams)> {
    use rand::Rng;
    let mut init_rng = rng::stream(seed, "oracle_policy", &[]);
    let mut old_flat = vec![0.0f64; PolicyParams::zeros(spec).dimension()];
    for x in old_flat.iter_mut() {
        *x = init_rng.gen_range(-0.8..0.8);
    }
    let params_old = PolicyParams::from_flat(spec, old_flat)?;
    let mut new_flat = params_old.flatten();
    for x in new_flat.iter_mut() {
        *x += init_rng.gen_range(-0.2..0.2);
    }
    let params_new = PolicyParams::from_flat(spec, new_flat)?;

    let groups: Vec<Group> = (0..spec.num_prompts)
        .map(|q| {
            let mut rng = rng::stream(seed, "oracle_rollout", &[q as u64]);
            Group::rollout(spec, &params_old, q, group_size, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut history = pruning::HistoryStore::new(spec.num_prompts);
    history.set_epoch(2);
    let batch: Vec<usize> = groups.iter().map(|g| g.prompt_id).collect();
    let thresholds: std::collections::BTreeMap<usize, f64> = groups
        .iter()
        .map(|g| pruning::completion_threshold(&g.advantages).map(|t| (g.prompt_id, t)))
        .collect::<Result<_>>()?;
    pruning::update_history(&mut history, &batch.iter().copied().collect(), &thresholds)?;
    let candidates = pruning::select_prompt_candidates(&history, &batch, beta);
    Ok((groups, candidates, params_new))
}

/// Convenience: psi of a group entry at given parameters (used by tests).
pub fn group_psi(params: &PolicyParams, group: &Group, i: usize) -> Result<GradientVector> {
    let entry: GroupEntry<'_> = group.entry(i);
    grpo::psi(params, &entry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::WeightMode;

    #[test]
    fn variance_factor_matches_reference_points() {
        let f = variance_factor(0.5, 0.9).unwrap();
        assert!((f - 3.025).abs() < 1e-12, "factor {f}");
        let f = variance_factor(0.5, 0.7).unwrap();
        assert!((f - 1.4083333333333334).abs() < 1e-12);
        assert!(f <= 1.42);
        assert_eq!(variance_factor(0.5, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn variance_factor_monotone_in_rate() {
        for beta in [0.25, 0.5, 0.75] {
            let mut prev = variance_factor(beta, 0.0).unwrap();
            for i in 1..20 {
                let r = i as f64 / 20.0;
                let f = variance_factor(beta, r).unwrap();
                assert!(f >= prev - 1e-12, "beta {beta} r {r}");
                prev = f;
            }
        }
    }

    #[test]
    fn variance_factor_domain_errors() {
        assert!(variance_factor(0.5, 1.0).is_err());
        assert!(variance_factor(0.0, 0.5).is_err());
    }

    #[test]
    fn unbiasedness_identity_at_zero_rates() {
        let spec = TaskSpec::desk_default();
        let (groups, candidates, params_new) = sampled_batch_for_checks(&spec, 4, 0.5, 17).unwrap();
        let cfg = PruningConfig::default();
        let report = exact_unbiasedness(
            &groups,
            &candidates,
            &params_new,
            &cfg,
            PruneLevel::Hierarchical,
            DEFAULT_PLAN_CAP,
        )
        .unwrap();
        assert_eq!(report.max_abs_deviation, 0.0);
    }

    #[test]
    fn unbiasedness_small_grid() {
        let spec = TaskSpec::desk_default();
        let (groups, candidates, params_new) = sampled_batch_for_checks(&spec, 4, 0.5, 99).unwrap();
        for mode in [PruneMode::Bernoulli, PruneMode::DeterministicFraction] {
            for level in [
                PruneLevel::Completion,
                PruneLevel::Prompt,
                PruneLevel::Hierarchical,
            ] {
                let cfg = PruningConfig {
                    r_o: 0.5,
                    r_q: 0.5,
                    mode,
                    ..Default::default()
                };
                let report = exact_unbiasedness(
                    &groups,
                    &candidates,
                    &params_new,
                    &cfg,
                    level,
                    DEFAULT_PLAN_CAP,
                )
                .unwrap();
                assert!(
                    report.max_abs_deviation < 1e-12,
                    "{mode:?}/{level:?}: deviation {}",
                    report.max_abs_deviation
                );
            }
        }
    }

    #[test]
    fn nominal_weights_break_deterministic_unbiasedness() {
        // With nominal weights the deterministic floor introduces measurable
        // bias whenever floor(r|C|)/|C| != r; this is the gap the
        // inclusion-exact convention removes.
        let spec = TaskSpec::desk_default();
        let (groups, candidates, params_new) = sampled_batch_for_checks(&spec, 4, 0.5, 23).unwrap();
        let cfg = PruningConfig {
            r_o: 0.9,
            weighting: WeightMode::Nominal,
            ..Default::default()
        };
        let report = exact_unbiasedness(
            &groups,
            &candidates,
            &params_new,
            &cfg,
            PruneLevel::Completion,
            DEFAULT_PLAN_CAP,
        )
        .unwrap();
        assert!(
            report.max_abs_deviation > 1e-6,
            "expected visible bias, got {}",
            report.max_abs_deviation
        );
    }

    #[test]
    fn enumeration_capacity_is_enforced() {
        let spec = TaskSpec::desk_default();
        let (groups, candidates, params_new) = sampled_batch_for_checks(&spec, 4, 0.5, 31).unwrap();
        let cfg = PruningConfig {
            r_o: 0.5,
            mode: PruneMode::Bernoulli,
            ..Default::default()
        };
        let err = exact_unbiasedness(
            &groups,
            &candidates,
            &params_new,
            &cfg,
            PruneLevel::Completion,
            2,
        );
        assert!(matches!(err, Err(Error::Capacity(_))));
    }

    #[test]
    fn finite_diff_quadratic_is_tight() {
        let spec = TaskSpec::desk_default();
        let params = PolicyParams::zeros(&spec);
        let coeffs: Vec<f64> = (0..params.dimension())
            .map(|j| 0.3 + (j % 7) as f64 * 0.1)
            .collect();
        let c2 = coeffs.clone();
        let objective = move |p: &PolicyParams| -> f64 {
            p.flatten()
                .iter()
                .zip(&c2)
                .map(|(x, c)| c * x * x + 0.25 * x)
                .sum()
        };
        let analytic = GradientVector::from_vec(
            params
                .flatten()
                .iter()
                .zip(&coeffs)
                .map(|(x, c)| 2.0 * c * x + 0.25)
                .collect(),
        );
        let err = finite_diff_max_rel_error(&spec, &params, objective, &analytic, 1e-6).unwrap();
        assert!(err < 1e-9, "error {err}");
    }

    #[test]
    fn dist_oracle_mean_gradient_matches_surrogate_fd() {
        let (spec, params) = variance_test_instance();
        let cfg = PruningConfig {
            r_o: 0.5,
            r_q: 0.5,
            ..Default::default()
        };
        let oracle = DistOracle::new(&spec, &params, &cfg).unwrap();
        let analytic = oracle.mean_gradient(&params).unwrap();
        let o2 = oracle.clone();
        let err = finite_diff_max_rel_error(
            &spec,
            &params,
            move |p| o2.surrogate_objective(p).unwrap(),
            &analytic,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "error {err}");
    }

    #[test]
    fn pruned_objective_equals_plain_objective() {
        let (spec, params) = variance_test_instance();
        let cfg = PruningConfig {
            r_o: 0.7,
            r_q: 0.7,
            ..Default::default()
        };
        let oracle = DistOracle::new(&spec, &params, &cfg).unwrap();
        // At an off-policy point too.
        let mut shifted = params.flatten();
        for (j, x) in shifted.iter_mut().enumerate() {
            *x += ((j % 5) as f64 - 2.0) * 0.05;
        }
        let theta = PolicyParams::from_flat(&spec, shifted).unwrap();
        let a = oracle.surrogate_objective(&theta).unwrap();
        let b = oracle.pruned_objective(&theta).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn engineered_instance_satisfies_conditions() {
        let (spec, params) = variance_test_instance();
        for r in [0.7, 0.9] {
            let cfg = PruningConfig {
                r_o: r,
                r_q: r,
                ..Default::default()
            };
            let oracle = DistOracle::new(&spec, &params, &cfg).unwrap();
            let report = oracle.check_low_score_condition(&params).unwrap();
            assert!(
                report.all_ok(),
                "conditions violated at r = {r}: {report:?}"
            );
        }
    }

    #[test]
    fn uniform_policy_violates_completion_condition_at_high_rate() {
        let spec = TaskSpec::desk_default();
        let params = PolicyParams::zeros(&spec);
        let cfg = PruningConfig {
            r_o: 0.9,
            r_q: 0.0,
            ..Default::default()
        };
        let oracle = DistOracle::new(&spec, &params, &cfg).unwrap();
        let report = oracle.check_low_score_condition(&params).unwrap();
        assert!(
            report.completion_ok.iter().any(|&ok| !ok),
            "the uniform policy should violate the condition at r_o = 0.9"
        );
    }

    #[test]
    fn per_level_variance_non_increase_on_engineered_instance() {
        let (spec, params) = variance_test_instance();
        for r in [0.7, 0.9] {
            let cfg = PruningConfig {
                r_o: r,
                r_q: r,
                ..Default::default()
            };
            let oracle = DistOracle::new(&spec, &params, &cfg).unwrap();
            for q in 0..spec.num_prompts {
                let (pruned, full) = oracle.completion_variance(&params, q).unwrap();
                assert!(
                    pruned <= full + 1e-12,
                    "prompt {q} r {r}: {pruned} > {full}"
                );
            }
            let (pruned, full) = oracle.prompt_variance(&params).unwrap();
            assert!(
                pruned <= full + 1e-12,
                "prompt level r {r}: {pruned} > {full}"
            );
        }
    }

    #[test]
    fn empirical_variance_reduces_to_full_batch_at_zero_rates() {
        let (spec, params) = variance_test_instance();
        let cfg = PruningConfig::default();
        let report = empirical_variance(&spec, &params, &cfg, 20_000, 77).unwrap();
        assert_eq!(report.bound_factor, 1.0);
        let exact_total = report.var_between_prompts + report.mean_within_prompt;
        assert!(
            (report.var_pruned - exact_total).abs() <= 6.0 * report.jackknife_se,
            "MC {} vs exact {} (se {})",
            report.var_pruned,
            exact_total,
            report.jackknife_se
        );
        assert!(report.satisfied);
    }

    #[test]
    fn empirical_variance_requires_enough_trials() {
        let (spec, params) = variance_test_instance();
        assert!(empirical_variance(&spec, &params, &PruningConfig::default(), 100, 1).is_err());
    }

    #[test]
    fn exact_batch_gradient_matches_monte_carlo_on_tiny_task() {
        let spec = TaskSpec {
            num_prompts: 2,
            vocab_size: 2,
            completion_len: 1,
            prompt_lengths: vec![1, 2],
            target_map: vec![vec![0], vec![1]],
            enumerable: true,
            enumeration_cap: 100,
        };
        let mut params_old = PolicyParams::zeros(&spec);
        *params_old.logit_mut(0, 0, 0) = 0.4;
        *params_old.logit_mut(1, 0, 1) = -0.3;
        let mut params_new = params_old.clone();
        *params_new.logit_mut(0, 0, 1) = 0.2;

        let group_size = 3;
        let exact =
            exact_batch_gradient(&spec, &params_new, &params_old, group_size, 10_000).unwrap();

        let trials = 200_000;
        let dim = params_new.dimension();
        let mut s1 = vec![0.0f64; dim];
        let mut s2 = vec![0.0f64; dim];
        for t in 0..trials {
            let mut batch = GradientVector::zeros(dim);
            for q in 0..spec.num_prompts {
                let mut grp_rng = rng::stream(5, "tiny_mc_grp", &[t as u64, q as u64]);
                let group =
                    Group::rollout(&spec, &params_old, q, group_size, &mut grp_rng).unwrap();
                let mut inner = GradientVector::zeros(dim);
                for i in 0..group.len() {
                    inner.add_scaled(&grpo::psi(&params_new, &group.entry(i)).unwrap(), 1.0);
                }
                inner.scale(1.0 / group_size as f64);
                batch.add_scaled(&inner, 1.0 / spec.num_prompts as f64);
            }
            for (j, &x) in batch.as_slice().iter().enumerate() {
                s1[j] += x;
                s2[j] += x * x;
            }
        }
        let n = trials as f64;
        for j in 0..dim {
            let mean = s1[j] / n;
            let se = (((s2[j] - s1[j] * s1[j] / n) / (n - 1.0)) / n).sqrt();
            let diff = (mean - exact.as_slice()[j]).abs();
            assert!(
                diff <= 4.0 * se + 1e-12,
                "component {j}: diff {diff}, se {se}"
            );
        }
    }

    #[test]
    fn exact_batch_gradient_capacity() {
        let spec = TaskSpec::desk_default();
        let params = PolicyParams::zeros(&spec);
        assert!(matches!(
            exact_batch_gradient(&spec, &params, &params, 16, 1_000),
            Err(Error::Capacity(_))
        ));
    }
}
