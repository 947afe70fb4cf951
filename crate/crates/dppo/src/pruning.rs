//! Hierarchical pruning with importance rescaling.
//!
//! Completions whose absolute advantage falls at or below the group's mean
//! absolute advantage are pruning candidates; prompts whose historical
//! difficulty score ranks in the bottom `beta` fraction of the batch are
//! candidates at the prompt level. Candidates are dropped either
//! independently (`bernoulli`) or as an exact floor fraction
//! (`deterministic_fraction`), and every retained item is reweighted by
//! `(|S|/n) / keep_probability` so the weighted estimator keeps the same
//! expectation as the unpruned one (an inverse-inclusion-probability, i.e.
//! Horvitz-Thompson, correction). With both rates at zero all weights are 1
//! and training reduces exactly to plain group-relative optimization.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grpo::Group;

/// How candidates are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Each candidate is dropped independently with the configured rate.
    Bernoulli,
    /// Exactly `floor(rate * |candidates|)` candidates are dropped, chosen
    /// uniformly without replacement.
    DeterministicFraction,
}

/// Which keep-probability enters the rescaling weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Use the realized keep probability of the drop mechanism. Makes the
    /// weighted estimator exactly unbiased over the pruning randomness.
    InclusionExact,
    /// Use the nominal rate `1 - r` even in deterministic mode; kept so the
    /// gap between the two conventions can be measured.
    Nominal,
}

/// Pruning rates and mechanics for both levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruningConfig {
    /// Completion-level pruning probability, in `[0, 1)`.
    pub r_o: f64,
    /// Prompt-level pruning probability, in `[0, 1)`.
    pub r_q: f64,
    /// Bottom fraction of prompts (by history score) forming the prompt
    /// candidate set, in `(0, 1]`.
    pub beta: f64,
    pub mode: PruneMode,
    pub weighting: WeightMode,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            r_o: 0.0,
            r_q: 0.0,
            beta: 0.5,
            mode: PruneMode::DeterministicFraction,
            weighting: WeightMode::InclusionExact,
        }
    }
}

impl PruningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.r_o) {
            return Err(Error::invalid_input(format!(
                "invariant r_o < 1 violated: pruning.r_o must be in [0, 1) (got {})",
                self.r_o
            )));
        }
        if !(0.0..1.0).contains(&self.r_q) {
            return Err(Error::invalid_input(format!(
                "invariant r_q < 1 violated: pruning.r_q must be in [0, 1) (got {})",
                self.r_q
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid_input(format!(
                "invariant beta in (0, 1] violated (got {})",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Per-prompt historical difficulty scores with carry-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStore {
    scores: Vec<f64>,
    pub epoch: u32,
}

impl HistoryStore {
    /// Fresh store: every prompt starts at score zero, epoch 1.
    pub fn new(num_prompts: usize) -> Self {
        HistoryStore {
            scores: vec![0.0; num_prompts],
            epoch: 1,
        }
    }

    pub fn score(&self, prompt_id: usize) -> f64 {
        self.scores[prompt_id]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Called by the trainer at each epoch boundary.
    pub fn set_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
    }
}

/// Keep/drop decisions and rescaling weights for one level (the items are
/// either a batch of prompts or one group's completions).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelPlan {
    pub keep: Vec<bool>,
    /// Rescaling weight per item: exactly 0 for dropped items, positive for
    /// kept ones. Kept non-candidates all share the value `|S|/n`.
    pub weight: Vec<f64>,
    pub candidate: Vec<bool>,
    /// Keep probability used in each item's weight denominator.
    pub inclusion: Vec<f64>,
}

impl LevelPlan {
    /// No pruning: everything kept with weight 1.
    pub fn identity(n: usize) -> Self {
        LevelPlan {
            keep: vec![true; n],
            weight: vec![1.0; n],
            candidate: vec![false; n],
            inclusion: vec![1.0; n],
        }
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }
}

/// A full hierarchical plan for one batch: the prompt-level plan (aligned
/// with `batch`) plus a completion-level plan per retained prompt.
#[derive(Debug, Clone)]
pub struct PruningPlan {
    /// Prompt ids in batch processing order.
    pub batch: Vec<usize>,
    pub prompts: LevelPlan,
    pub completions: BTreeMap<usize, LevelPlan>,
}

impl PruningPlan {
    pub fn kept_prompts(&self) -> Vec<usize> {
        self.prompts
            .kept_indices()
            .into_iter()
            .map(|i| self.batch[i])
            .collect()
    }

    pub fn prompt_weight(&self, prompt_id: usize) -> Option<f64> {
        self.batch
            .iter()
            .position(|&q| q == prompt_id)
            .map(|i| self.prompts.weight[i])
    }
}

/// `floor(rate * count)`, snapping to the nearest integer first when the
/// product lands within 1e-9 of one (guards against cases like
/// `0.3 * 10 = 2.999...96` flooring to 2).
pub(crate) fn floor_fraction(rate: f64, count: usize) -> usize {
    let x = rate * count as f64;
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        x.floor() as usize
    }
}

/// The drop mechanism for one level, shared by the sampler and the plan
/// enumeration oracle so weights cannot drift between them.
#[derive(Debug, Clone)]
pub(crate) struct LevelMechanics {
    pub n: usize,
    pub candidates: Vec<usize>,
    pub is_candidate: Vec<bool>,
    pub rate: f64,
    pub mode: PruneMode,
    /// `Some(m)` in deterministic mode: exactly m candidates are dropped.
    pub drop_quota: Option<usize>,
    /// Keep probability entering kept-candidate weights.
    pub weight_inclusion: f64,
    /// Completion level only: if a plan would drop every item, one uniformly
    /// chosen candidate is put back (the estimator divides by the retained
    /// count, and the trainer needs at least one sample per group).
    pub resurrect: bool,
}

impl LevelMechanics {
    pub fn new(
        is_candidate: Vec<bool>,
        rate: f64,
        mode: PruneMode,
        weighting: WeightMode,
        resurrect: bool,
    ) -> Self {
        let n = is_candidate.len();
        let candidates: Vec<usize> = is_candidate
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect();
        let n_cand = candidates.len();
        let drop_quota = match mode {
            PruneMode::DeterministicFraction => {
                // r < 1 implies floor(r * |C|) <= |C| - 1; the min only
                // corrects snap overreach for rates within 1e-9 of 1.
                Some(floor_fraction(rate, n_cand).min(n_cand.saturating_sub(1)))
            }
            PruneMode::Bernoulli => None,
        };
        let actual_inclusion = match mode {
            PruneMode::DeterministicFraction => {
                if n_cand == 0 {
                    1.0
                } else {
                    1.0 - drop_quota.unwrap() as f64 / n_cand as f64
                }
            }
            PruneMode::Bernoulli => {
                if resurrect && n_cand == n && n_cand > 0 {
                    // All items are candidates, so the all-dropped pattern is
                    // possible and resurrection raises each candidate's keep
                    // probability by rate^n / n.
                    1.0 - rate + rate.powi(n_cand as i32) / n_cand as f64
                } else {
                    1.0 - rate
                }
            }
        };
        let weight_inclusion = match weighting {
            WeightMode::InclusionExact => actual_inclusion,
            WeightMode::Nominal => 1.0 - rate,
        };
        LevelMechanics {
            n,
            candidates,
            is_candidate,
            rate,
            mode,
            drop_quota,
            weight_inclusion,
            resurrect,
        }
    }

    /// Realize keep flags and weights for a given dropped set.
    pub fn plan_from_dropped(&self, dropped: &[bool]) -> LevelPlan {
        debug_assert_eq!(dropped.len(), self.n);
        let keep: Vec<bool> = dropped.iter().map(|&d| !d).collect();
        let kept = keep.iter().filter(|&&k| k).count();
        let c_const = kept as f64 / self.n as f64;
        let mut weight = vec![0.0; self.n];
        let mut inclusion = vec![1.0; self.n];
        for i in 0..self.n {
            if self.is_candidate[i] {
                inclusion[i] = self.weight_inclusion;
            }
            if keep[i] {
                weight[i] = c_const / inclusion[i];
            }
        }
        LevelPlan {
            keep,
            weight,
            candidate: self.is_candidate.clone(),
            inclusion,
        }
    }

    /// Draw one plan from the mechanism.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> LevelPlan {
        let mut dropped = vec![false; self.n];
        if self.rate > 0.0 && !self.candidates.is_empty() {
            match self.mode {
                PruneMode::Bernoulli => {
                    for &i in &self.candidates {
                        if rng.gen::<f64>() < self.rate {
                            dropped[i] = true;
                        }
                    }
                    if self.resurrect && dropped.iter().all(|&d| d) {
                        let pick = self.candidates[rng.gen_range(0..self.candidates.len())];
                        dropped[pick] = false;
                    }
                }
                PruneMode::DeterministicFraction => {
                    let m = self.drop_quota.unwrap();
                    if m > 0 {
                        let chosen = rand::seq::index::sample(rng, self.candidates.len(), m);
                        for idx in chosen.iter() {
                            dropped[self.candidates[idx]] = true;
                        }
                    }
                }
            }
        }
        self.plan_from_dropped(&dropped)
    }
}

/// Mean absolute advantage of a group; the candidacy threshold.
pub fn completion_threshold(advantages: &[f64]) -> Result<f64> {
    if advantages.is_empty() {
        return Err(Error::invalid_input(
            "completion_threshold needs at least one advantage",
        ));
    }
    Ok(advantages.iter().map(|a| a.abs()).sum::<f64>() / advantages.len() as f64)
}

/// Candidate flags: `|A_i| <= mean(|A|)`. The comparison is inclusive, so a
/// group with all-equal magnitudes makes every completion a candidate.
pub fn completion_candidates(advantages: &[f64]) -> Result<Vec<bool>> {
    let threshold = completion_threshold(advantages)?;
    Ok(advantages.iter().map(|a| a.abs() <= threshold).collect())
}

pub(crate) fn completion_mechanics(
    advantages: &[f64],
    cfg: &PruningConfig,
) -> Result<LevelMechanics> {
    Ok(LevelMechanics::new(
        completion_candidates(advantages)?,
        cfg.r_o,
        cfg.mode,
        cfg.weighting,
        true,
    ))
}

/// Completion-level pruning for one group. At least one completion is
/// always retained.
pub fn prune_completions<R: Rng>(
    group: &Group,
    cfg: &PruningConfig,
    rng: &mut R,
) -> Result<LevelPlan> {
    cfg.validate()?;
    if cfg.r_o == 0.0 {
        return Ok(LevelPlan {
            candidate: completion_candidates(&group.advantages)?,
            ..LevelPlan::identity(group.len())
        });
    }
    Ok(completion_mechanics(&group.advantages, cfg)?.sample(rng))
}

/// The bottom `floor(beta * |batch|)` prompts of the batch ranked by history
/// score ascending, ties broken by ascending prompt id. Empty before epoch 2
/// (no history exists yet).
pub fn select_prompt_candidates(
    history: &HistoryStore,
    batch: &[usize],
    beta: f64,
) -> BTreeSet<usize> {
    if history.epoch < 2 {
        return BTreeSet::new();
    }
    let k = floor_fraction(beta, batch.len());
    let mut ranked: Vec<usize> = batch.to_vec();
    ranked.sort_by(|&a, &b| {
        history
            .score(a)
            .partial_cmp(&history.score(b))
            .expect("history scores are finite")
            .then(a.cmp(&b))
    });
    ranked.into_iter().take(k).collect()
}

pub(crate) fn prompt_mechanics(
    batch: &[usize],
    candidates: &BTreeSet<usize>,
    cfg: &PruningConfig,
) -> LevelMechanics {
    let is_candidate: Vec<bool> = batch.iter().map(|q| candidates.contains(q)).collect();
    LevelMechanics::new(is_candidate, cfg.r_q, cfg.mode, cfg.weighting, false)
}

/// Prompt-level pruning over a batch. A plan that keeps zero prompts is
/// possible only when every prompt is a candidate under bernoulli dropping;
/// the trainer treats that as a degenerate batch and skips it.
pub fn prune_prompts<R: Rng>(
    batch: &[usize],
    candidates: &BTreeSet<usize>,
    cfg: &PruningConfig,
    rng: &mut R,
) -> Result<LevelPlan> {
    cfg.validate()?;
    if !candidates.iter().all(|q| batch.contains(q)) {
        return Err(Error::invalid_input(
            "prompt candidates must be a subset of the batch",
        ));
    }
    if cfg.r_q == 0.0 {
        let is_candidate: Vec<bool> = batch.iter().map(|q| candidates.contains(q)).collect();
        return Ok(LevelPlan {
            candidate: is_candidate,
            ..LevelPlan::identity(batch.len())
        });
    }
    Ok(prompt_mechanics(batch, candidates, cfg).sample(rng))
}

/// Carry-forward history update: selected prompts take their fresh mean
/// absolute advantage, everything else keeps its previous score.
pub fn update_history(
    history: &mut HistoryStore,
    selected: &BTreeSet<usize>,
    thresholds: &BTreeMap<usize, f64>,
) -> Result<()> {
    for &q in selected {
        if q >= history.len() {
            return Err(Error::Consistency(format!(
                "selected prompt {q} outside history (len {})",
                history.len()
            )));
        }
        let fresh = thresholds.get(&q).ok_or_else(|| {
            Error::Consistency(format!("no threshold recorded for selected prompt {q}"))
        })?;
        history.scores[q] = *fresh;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskSpec;
    use crate::policy::PolicyParams;
    use crate::rng::{stream, STREAM_COMPLETION_PRUNE, STREAM_PROMPT_PRUNE};
    use proptest::prelude::*;

    fn group_with_advantages(advantages: Vec<f64>) -> Group {
        let spec = TaskSpec::desk_default();
        let params = PolicyParams::zeros(&spec);
        let completions: Vec<_> = (0..advantages.len())
            .map(|i| crate::env::Completion {
                prompt_id: 0,
                tokens: vec![i % 3, (i + 1) % 3],
            })
            .collect();
        let mut g = Group::from_completions(&spec, &params, 0, completions).unwrap();
        g.advantages = advantages;
        g
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(completion_threshold(&[1.0, -1.0, -1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(completion_threshold(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        let adv = [2.0, -1.0, -1.0, 0.0];
        assert_eq!(completion_threshold(&adv).unwrap(), 1.0);
        let cands = completion_candidates(&adv).unwrap();
        assert_eq!(cands, vec![false, true, true, true]);
    }

    #[test]
    fn threshold_rejects_empty() {
        assert!(completion_threshold(&[]).is_err());
    }

    #[test]
    fn no_completion_pruning_at_rate_zero() {
        let g = group_with_advantages(vec![1.0, -1.0, 0.5, -0.5]);
        let cfg = PruningConfig::default();
        let mut rng = stream(0, STREAM_COMPLETION_PRUNE, &[0]);
        let plan = prune_completions(&g, &cfg, &mut rng).unwrap();
        assert!(plan.keep.iter().all(|&k| k));
        assert!(plan.weight.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn deterministic_fraction_weights_match_realized_counts() {
        // G=5 with 4 candidates; r_o = 0.5 drops exactly 2 of them.
        let g = group_with_advantages(vec![2.0, 0.5, 0.5, -0.5, -0.5]);
        let cfg = PruningConfig {
            r_o: 0.5,
            ..Default::default()
        };
        let mut rng = stream(3, STREAM_COMPLETION_PRUNE, &[1]);
        let plan = prune_completions(&g, &cfg, &mut rng).unwrap();
        assert_eq!(plan.candidate, vec![false, true, true, true, true]);
        assert_eq!(plan.kept_count(), 3);
        assert!(plan.keep[0], "non-candidate must always be kept");
        assert!((plan.weight[0] - 0.6).abs() < 1e-15);
        for i in 1..5 {
            if plan.keep[i] {
                assert!(
                    (plan.weight[i] - 1.2).abs() < 1e-15,
                    "weight {}",
                    plan.weight[i]
                );
            } else {
                assert_eq!(plan.weight[i], 0.0);
            }
        }
    }

    #[test]
    fn deterministic_fraction_floor_arithmetic() {
        // 3 candidates at r_o = 0.9: floor(2.7) = 2 dropped, keep prob 1/3.
        let g = group_with_advantages(vec![2.0, 2.0, 0.1, 0.2, 0.3]);
        let cfg = PruningConfig {
            r_o: 0.9,
            ..Default::default()
        };
        let mut rng = stream(4, STREAM_COMPLETION_PRUNE, &[2]);
        let plan = prune_completions(&g, &cfg, &mut rng).unwrap();
        let dropped_candidates = (2..5).filter(|&i| !plan.keep[i]).count();
        assert_eq!(dropped_candidates, 2);
        for i in 2..5 {
            assert!((plan.inclusion[i] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn floor_fraction_snaps_representation_noise() {
        assert_eq!(floor_fraction(0.3, 10), 3);
        assert_eq!(floor_fraction(0.9, 3), 2);
        assert_eq!(floor_fraction(0.5, 4), 2);
        assert_eq!(floor_fraction(0.7, 5), 3);
        assert_eq!(floor_fraction(0.0, 9), 0);
    }

    #[test]
    fn bernoulli_group_never_emptied() {
        // All advantages equal makes every completion a candidate; at a high
        // rate the all-dropped pattern occurs and resurrection must fire.
        let g = group_with_advantages(vec![0.5, -0.5, 0.5, -0.5]);
        let cfg = PruningConfig {
            r_o: 0.9,
            mode: PruneMode::Bernoulli,
            ..Default::default()
        };
        for trial in 0..200 {
            let mut rng = stream(9, STREAM_COMPLETION_PRUNE, &[trial]);
            let plan = prune_completions(&g, &cfg, &mut rng).unwrap();
            assert!(plan.kept_count() >= 1, "trial {trial} kept nothing");
        }
    }

    #[test]
    fn bernoulli_inclusion_accounts_for_resurrection() {
        let g = group_with_advantages(vec![0.5, -0.5, 0.5, -0.5]);
        let cfg = PruningConfig {
            r_o: 0.5,
            mode: PruneMode::Bernoulli,
            ..Default::default()
        };
        let mut rng = stream(10, STREAM_COMPLETION_PRUNE, &[0]);
        let plan = prune_completions(&g, &cfg, &mut rng).unwrap();
        let expected = 0.5 + 0.5_f64.powi(4) / 4.0;
        for &inc in &plan.inclusion {
            assert!((inc - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn select_candidates_empty_in_first_epoch() {
        let history = HistoryStore::new(4);
        assert!(select_prompt_candidates(&history, &[0, 1, 2, 3], 0.5).is_empty());
    }

    #[test]
    fn select_candidates_ranks_by_history() {
        let mut history = HistoryStore::new(4);
        history.set_epoch(2);
        history.scores = vec![0.1, 0.9, 0.2, 0.8];
        let cands = select_prompt_candidates(&history, &[0, 1, 2, 3], 0.5);
        assert_eq!(cands, BTreeSet::from([0, 2]));
    }

    #[test]
    fn select_candidates_ties_break_by_id() {
        let mut history = HistoryStore::new(4);
        history.set_epoch(3);
        history.scores = vec![0.5; 4];
        let cands = select_prompt_candidates(&history, &[0, 1, 2, 3], 0.5);
        assert_eq!(cands, BTreeSet::from([0, 1]));
    }

    #[test]
    fn no_prompt_pruning_at_rate_zero() {
        let cfg = PruningConfig::default();
        let mut rng = stream(0, STREAM_PROMPT_PRUNE, &[0]);
        let plan = prune_prompts(&[0, 1, 2, 3], &BTreeSet::from([0, 2]), &cfg, &mut rng).unwrap();
        assert!(plan.weight.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn prompt_pruning_deterministic_weights() {
        // |Q| = 4, two candidates, r_q = 0.5: exactly one candidate dropped.
        let cfg = PruningConfig {
            r_q: 0.5,
            ..Default::default()
        };
        let mut rng = stream(8, STREAM_PROMPT_PRUNE, &[1]);
        let batch = [0, 1, 2, 3];
        let plan = prune_prompts(&batch, &BTreeSet::from([0, 2]), &cfg, &mut rng).unwrap();
        assert_eq!(plan.kept_count(), 3);
        for i in 0..4 {
            if !plan.keep[i] {
                assert!(plan.candidate[i]);
                assert_eq!(plan.weight[i], 0.0);
            } else if plan.candidate[i] {
                assert!((plan.weight[i] - 1.5).abs() < 1e-15);
            } else {
                assert!((plan.weight[i] - 0.75).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn prompt_pruning_bernoulli_weight_uses_rate() {
        let cfg = PruningConfig {
            r_q: 0.5,
            mode: PruneMode::Bernoulli,
            ..Default::default()
        };
        let batch = [0, 1, 2, 3];
        let mut rng = stream(12, STREAM_PROMPT_PRUNE, &[0]);
        let plan = prune_prompts(&batch, &BTreeSet::from([1, 3]), &cfg, &mut rng).unwrap();
        let s = plan.kept_count() as f64;
        for i in 0..4 {
            if plan.keep[i] && plan.candidate[i] {
                assert!((plan.weight[i] - (s / 4.0) / 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn prompt_candidates_must_be_subset() {
        let cfg = PruningConfig {
            r_q: 0.5,
            ..Default::default()
        };
        let mut rng = stream(0, STREAM_PROMPT_PRUNE, &[0]);
        assert!(prune_prompts(&[0, 1], &BTreeSet::from([5]), &cfg, &mut rng).is_err());
    }

    #[test]
    fn history_update_examples() {
        let mut history = HistoryStore::new(3);
        assert_eq!(history.scores(), &[0.0, 0.0, 0.0]);
        history.scores = vec![0.0, 0.4, 0.0];
        update_history(
            &mut history,
            &BTreeSet::from([0]),
            &BTreeMap::from([(0, 0.7)]),
        )
        .unwrap();
        assert_eq!(history.score(0), 0.7);
        assert_eq!(history.score(1), 0.4);
    }

    #[test]
    fn history_update_missing_threshold_errors() {
        let mut history = HistoryStore::new(2);
        let err = update_history(&mut history, &BTreeSet::from([1]), &BTreeMap::new());
        assert!(matches!(err, Err(Error::Consistency(_))));
    }

    #[test]
    fn monotone_candidacy() {
        let mut adv = vec![0.5, -0.5, 0.5, -0.5, 0.5];
        let cands = completion_candidates(&adv).unwrap();
        assert!(cands[2]);
        adv[2] = 10.0;
        let cands = completion_candidates(&adv).unwrap();
        assert!(!cands[2], "raising |A| above the mean must drop candidacy");
    }

    #[test]
    fn plans_are_deterministic_per_stream() {
        let g = group_with_advantages(vec![1.5, -0.3, 0.2, -1.0, 0.1]);
        for mode in [PruneMode::Bernoulli, PruneMode::DeterministicFraction] {
            let cfg = PruningConfig {
                r_o: 0.7,
                mode,
                ..Default::default()
            };
            let mut a = stream(21, STREAM_COMPLETION_PRUNE, &[5]);
            let mut b = stream(21, STREAM_COMPLETION_PRUNE, &[5]);
            assert_eq!(
                prune_completions(&g, &cfg, &mut a).unwrap(),
                prune_completions(&g, &cfg, &mut b).unwrap()
            );
        }
    }

    // Enumeration of every bernoulli pattern (with resurrection branches)
    // and every deterministic subset: the weighted mean over kept items must
    // equal the plain mean exactly, for arbitrary per-item values.
    #[test]
    fn conditional_unbiasedness_by_enumeration() {
        let x = [3.0, -1.0, 4.0, 1.5, -2.0];
        let advantages = [0.5, -0.5, 0.5, -0.5, 0.5]; // all candidates
        let truth: f64 = x.iter().sum::<f64>() / x.len() as f64;
        for mode in [PruneMode::Bernoulli, PruneMode::DeterministicFraction] {
            for rate in [0.3, 0.5, 0.9] {
                let cfg = PruningConfig {
                    r_o: rate,
                    mode,
                    ..Default::default()
                };
                let mech = completion_mechanics(&advantages, &cfg).unwrap();
                let mut expectation = 0.0;
                match mode {
                    PruneMode::Bernoulli => {
                        let nc = mech.candidates.len();
                        for pattern in 0u32..(1 << nc) {
                            let mut dropped = vec![false; x.len()];
                            let mut ndrop = 0;
                            for (bit, &i) in mech.candidates.iter().enumerate() {
                                if pattern >> bit & 1 == 1 {
                                    dropped[i] = true;
                                    ndrop += 1;
                                }
                            }
                            let prob = rate.powi(ndrop) * (1.0 - rate).powi(nc as i32 - ndrop);
                            if dropped.iter().all(|&d| d) {
                                for &res in &mech.candidates {
                                    let mut d = dropped.clone();
                                    d[res] = false;
                                    let plan = mech.plan_from_dropped(&d);
                                    expectation += prob / nc as f64 * weighted_mean(&plan, &x);
                                }
                            } else {
                                let plan = mech.plan_from_dropped(&dropped);
                                expectation += prob * weighted_mean(&plan, &x);
                            }
                        }
                    }
                    PruneMode::DeterministicFraction => {
                        use itertools::Itertools;
                        let m = mech.drop_quota.unwrap();
                        let subsets: Vec<Vec<usize>> =
                            mech.candidates.iter().copied().combinations(m).collect();
                        for subset in &subsets {
                            let mut dropped = vec![false; x.len()];
                            for &i in subset {
                                dropped[i] = true;
                            }
                            let plan = mech.plan_from_dropped(&dropped);
                            expectation += weighted_mean(&plan, &x) / subsets.len() as f64;
                        }
                    }
                }
                assert!(
                    (expectation - truth).abs() < 1e-12,
                    "{mode:?} rate {rate}: {expectation} vs {truth}"
                );
            }
        }
    }

    fn weighted_mean(plan: &LevelPlan, x: &[f64]) -> f64 {
        let s = plan.kept_count() as f64;
        plan.keep
            .iter()
            .zip(plan.weight.iter())
            .zip(x.iter())
            .filter(|((&k, _), _)| k)
            .map(|((_, &w), &v)| w * v)
            .sum::<f64>()
            / s
    }

    proptest! {
        // Horvitz-Thompson identity on any realized plan:
        // (1/|S|) sum_kept gamma_i x_i == (1/G) sum_kept x_i / keep_prob_i.
        #[test]
        fn horvitz_thompson_identity(
            x in proptest::collection::vec(-5.0_f64..5.0, 5),
            adv in proptest::collection::vec(-2.0_f64..2.0, 5),
            seed in 0u64..500,
            rate in 0.05_f64..0.95,
            bern in proptest::bool::ANY,
        ) {
            let g = group_with_advantages(adv);
            let cfg = PruningConfig {
                r_o: rate,
                mode: if bern { PruneMode::Bernoulli } else { PruneMode::DeterministicFraction },
                ..Default::default()
            };
            let mut rng = stream(seed, STREAM_COMPLETION_PRUNE, &[0]);
            let plan = prune_completions(&g, &cfg, &mut rng).unwrap();
            let s = plan.kept_count() as f64;
            let lhs: f64 = (0..5)
                .filter(|&i| plan.keep[i])
                .map(|i| plan.weight[i] * x[i])
                .sum::<f64>() / s;
            let rhs: f64 = (0..5)
                .filter(|&i| plan.keep[i])
                .map(|i| x[i] / plan.inclusion[i])
                .sum::<f64>() / 5.0;
            prop_assert!((lhs - rhs).abs() < 1e-12, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn config_validation_names_invariants() {
        let cfg = PruningConfig {
            r_q: 1.0,
            ..Default::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("r_q < 1"), "message was: {msg}");
    }
}
