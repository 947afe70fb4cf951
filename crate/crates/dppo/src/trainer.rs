//! The full training loop: packed dataset order, per-epoch behavior-policy
//! refresh, history-guided prompt pruning, rollout, advantage-aware
//! completion pruning, and a reweighted gradient-ascent step per batch.
//!
//! The weighted batch gradient composes the two levels as
//!
//! ```text
//! (1/|Sq|) * sum over kept prompts of gamma(q) *
//!     (1/|So(q)|) * sum over kept completions of gamma(o, q) * psi
//! ```
//!
//! which with both pruning rates at zero is exactly the plain group-relative
//! batch gradient. Every random draw comes from a named stream keyed by
//! `(epoch, batch, prompt)`, so enabling pruning never perturbs rollouts and
//! results do not depend on the worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::Serialize;

use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::grpo::{self, Group, SurrogateConfig};
use crate::packing::{self, PackStrategy};
use crate::policy::{GradientVector, PolicyParams};
use crate::pruning::{self, HistoryStore, LevelPlan, PruningConfig, PruningPlan};
use crate::rng;

/// Packing keys as they appear in the run configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PackSettings {
    pub strategy: PackStrategy,
    /// Token budget per sequence; 0 means "longest prompt in the dataset".
    pub l_max: usize,
    pub n_win: usize,
}

impl Default for PackSettings {
    fn default() -> Self {
        PackSettings {
            strategy: PackStrategy::Off,
            l_max: 0,
            n_win: 4,
        }
    }
}

/// Everything the training loop needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub group_size: usize,
    pub learning_rate: f64,
    pub surrogate: SurrogateConfig,
    pub pruning: PruningConfig,
    pub seed: u64,
    /// Prompts per batch; 0 means the whole dataset forms one batch.
    pub batch_prompts: usize,
    pub pack: PackSettings,
    /// Std-dev of the random logit initialization; 0 starts uniform.
    pub init_scale: f64,
    /// Measure real wall time into the metrics. Off by default so reruns of
    /// the same seed produce byte-identical outputs.
    pub measure_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            group_size: 5,
            learning_rate: 0.5,
            surrogate: SurrogateConfig::default(),
            pruning: PruningConfig::default(),
            seed: 42,
            // Two prompts per batch: four updates per epoch on the default
            // task, enough signal to saturate the desk-scale tasks within
            // the default epoch budget.
            batch_prompts: 2,
            pack: PackSettings::default(),
            init_scale: 0.0,
            measure_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid_input("train.epochs must be >= 1"));
        }
        if self.group_size < 2 {
            return Err(Error::invalid_input(format!(
                "invariant G >= 2 violated: train.group_size (got {})",
                self.group_size
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::invalid_input(format!(
                "invariant learning_rate > 0 violated (got {})",
                self.learning_rate
            )));
        }
        if self.pack.n_win == 0 {
            return Err(Error::invalid_input("packing.n_win must be >= 1"));
        }
        if self.init_scale < 0.0 {
            return Err(Error::invalid_input("train.init_scale must be >= 0"));
        }
        self.surrogate.validate()?;
        self.pruning.validate()?;
        Ok(())
    }
}

/// Per-batch log record; one JSON object per line in `metrics.jsonl`.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub epoch: u32,
    pub batch: u32,
    pub mean_reward: f64,
    pub pg_loss: f64,
    pub kl: f64,
    pub prompts_kept: usize,
    pub prompts_total: usize,
    pub completions_kept: usize,
    pub completions_total: usize,
    pub grad_norm: f64,
    pub wallclock_micros: u64,
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: PolicyParams,
    pub metrics: Vec<StepMetrics>,
    pub history: HistoryStore,
    pub batches_total: usize,
    pub batches_skipped: usize,
    /// Completions that entered backward-pass work over the whole run.
    pub completions_used: usize,
}

impl TrainResult {
    /// Mean reward of the last recorded epoch.
    pub fn final_mean_reward(&self) -> f64 {
        let last_epoch = match self.metrics.last() {
            Some(m) => m.epoch,
            None => return 0.0,
        };
        let rows: Vec<&StepMetrics> = self
            .metrics
            .iter()
            .filter(|m| m.epoch == last_epoch)
            .collect();
        rows.iter().map(|m| m.mean_reward).sum::<f64>() / rows.len() as f64
    }
}

/// The reweighted batch gradient of the surrogate objective.
///
/// `groups` must hold exactly the rolled-out groups of the plan's kept
/// prompts. Returns a degenerate-batch error when the plan keeps no prompt.
pub fn estimate_gradient(
    groups: &[Group],
    plan: &PruningPlan,
    params: &PolicyParams,
    cfg: &SurrogateConfig,
    params_ref: Option<&PolicyParams>,
) -> Result<GradientVector> {
    if plan.prompts.kept_count() == 0 {
        return Err(Error::DegenerateBatch(
            "pruning plan keeps zero prompts".to_string(),
        ));
    }
    let by_prompt: BTreeMap<usize, &Group> = groups.iter().map(|g| (g.prompt_id, g)).collect();
    let mut outer = GradientVector::zeros(params.dimension());
    let mut kept_prompts = 0usize;
    for (bi, &q) in plan.batch.iter().enumerate() {
        if !plan.prompts.keep[bi] {
            continue;
        }
        kept_prompts += 1;
        let group = by_prompt.get(&q).ok_or_else(|| {
            Error::Consistency(format!("plan keeps prompt {q} but no group was rolled out"))
        })?;
        let cplan = plan.completions.get(&q).ok_or_else(|| {
            Error::Consistency(format!("no completion plan recorded for prompt {q}"))
        })?;
        if cplan.keep.len() != group.len() {
            return Err(Error::Consistency(format!(
                "completion plan for prompt {q} has {} entries for a group of {}",
                cplan.keep.len(),
                group.len()
            )));
        }
        let kept_completions = cplan.kept_count();
        if kept_completions == 0 {
            return Err(Error::Consistency(format!(
                "completion plan for prompt {q} keeps nothing"
            )));
        }
        let mut inner = GradientVector::zeros(params.dimension());
        for i in 0..group.len() {
            if !cplan.keep[i] {
                continue;
            }
            let mut g = grpo::surrogate_gradient(params, &group.entry(i), cfg)?;
            if cfg.kl_beta > 0.0 {
                let reference = params_ref.ok_or_else(|| {
                    Error::invalid_input("kl_beta > 0 requires a reference policy")
                })?;
                let kl_grad = grpo::kl_penalty_gradient(
                    params,
                    reference,
                    &group.completions[i],
                    cfg.kl_beta,
                    cfg.token_level,
                )?;
                g.add_scaled(&kl_grad, 1.0);
            }
            inner.add_scaled(&g, cplan.weight[i]);
        }
        inner.scale(1.0 / kept_completions as f64);
        outer.add_scaled(&inner, plan.prompts.weight[bi]);
    }
    outer.scale(1.0 / kept_prompts as f64);
    Ok(outer)
}

/// Initial parameters for a run: uniform logits, optionally perturbed by
/// `init_scale` standard normal draws from the init stream.
pub fn initial_params(spec: &TaskSpec, seed: u64, init_scale: f64) -> PolicyParams {
    let mut params = PolicyParams::zeros(spec);
    if init_scale > 0.0 {
        use rand::Rng;
        let mut rng = rng::stream(seed, rng::STREAM_INIT, &[]);
        let flat: Vec<f64> = (0..params.dimension())
            .map(|_| {
                // Box-Muller keeps the dependency surface small.
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                init_scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        params = PolicyParams::from_flat(spec, flat).expect("dimensions match");
    }
    params
}

/// Dataset processing order: packed order when packing is on, natural
/// prompt-id order otherwise. Also returns the resolved token budget.
pub fn dataset_order(spec: &TaskSpec, pack: &PackSettings) -> Result<(Vec<usize>, usize)> {
    let ids: Vec<usize> = (0..spec.num_prompts).collect();
    let l_max = if pack.l_max == 0 {
        *spec.prompt_lengths.iter().max().expect("non-empty task")
    } else {
        pack.l_max
    };
    if pack.strategy == PackStrategy::Off {
        return Ok((ids, l_max));
    }
    let packed =
        packing::pack_with_strategy(&ids, &spec.prompt_lengths, l_max, pack.n_win, pack.strategy)?;
    Ok((packed.flattened(), l_max))
}

/// Run the full training loop. Completely reproducible from `cfg.seed`.
pub fn train(spec: &TaskSpec, cfg: &TrainConfig) -> Result<TrainResult> {
    spec.validate()?;
    cfg.validate()?;

    let mut params = initial_params(spec, cfg.seed, cfg.init_scale);
    let params_ref = params.clone();
    let mut history = HistoryStore::new(spec.num_prompts);
    let (order, _l_max) = dataset_order(spec, &cfg.pack)?;
    let batch_size = if cfg.batch_prompts == 0 {
        spec.num_prompts
    } else {
        cfg.batch_prompts
    };
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();

    let mut metrics = Vec::new();
    let mut batches_total = 0usize;
    let mut batches_skipped = 0usize;
    let mut completions_used = 0usize;

    for epoch in 1..=cfg.epochs {
        let params_old = params.clone();
        history.set_epoch(epoch);
        for (batch_idx, chunk) in chunks.iter().enumerate() {
            batches_total += 1;
            let started = Instant::now();
            let mut batch = chunk.clone();
            batch.sort_unstable();

            // Prompt-level pruning, skipped in the first epoch while the
            // history is still empty.
            let candidates = pruning::select_prompt_candidates(&history, &batch, cfg.pruning.beta);
            let prompt_plan = if cfg.pruning.r_q > 0.0 && history.epoch >= 2 {
                let mut prng = rng::stream(
                    cfg.seed,
                    rng::STREAM_PROMPT_PRUNE,
                    &[epoch as u64, batch_idx as u64],
                );
                pruning::prune_prompts(&batch, &candidates, &cfg.pruning, &mut prng)?
            } else {
                LevelPlan {
                    candidate: batch.iter().map(|q| candidates.contains(q)).collect(),
                    ..LevelPlan::identity(batch.len())
                }
            };
            let kept: Vec<usize> = prompt_plan
                .kept_indices()
                .into_iter()
                .map(|i| batch[i])
                .collect();
            if kept.is_empty() {
                batches_skipped += 1;
                log::warn!("epoch {epoch} batch {batch_idx}: degenerate batch skipped");
                continue;
            }

            // Rollout: per-prompt streams keyed by (epoch, batch, prompt).
            let rolled: Vec<Result<Group>> = {
                use rayon::prelude::*;
                kept.par_iter()
                    .map(|&q| {
                        let mut rng = rng::stream(
                            cfg.seed,
                            rng::STREAM_ROLLOUT,
                            &[epoch as u64, batch_idx as u64, q as u64],
                        );
                        Group::rollout(spec, &params_old, q, cfg.group_size, &mut rng)
                    })
                    .collect()
            };
            let groups: Vec<Group> = rolled.into_iter().collect::<Result<_>>()?;

            // Completion-level pruning plus the history refresh for every
            // prompt that was actually rolled out.
            let mut completion_plans: BTreeMap<usize, LevelPlan> = BTreeMap::new();
            let mut thresholds: BTreeMap<usize, f64> = BTreeMap::new();
            for group in &groups {
                let mut crng = rng::stream(
                    cfg.seed,
                    rng::STREAM_COMPLETION_PRUNE,
                    &[epoch as u64, batch_idx as u64, group.prompt_id as u64],
                );
                let plan = pruning::prune_completions(group, &cfg.pruning, &mut crng)?;
                thresholds.insert(
                    group.prompt_id,
                    pruning::completion_threshold(&group.advantages)?,
                );
                completion_plans.insert(group.prompt_id, plan);
            }
            let selected: BTreeSet<usize> = kept.iter().copied().collect();
            pruning::update_history(&mut history, &selected, &thresholds)?;

            let plan = PruningPlan {
                batch: batch.clone(),
                prompts: prompt_plan,
                completions: completion_plans,
            };

            let grad =
                estimate_gradient(&groups, &plan, &params, &cfg.surrogate, Some(&params_ref))?;
            params.add_scaled(&grad, cfg.learning_rate);

            let step = batch_metrics(
                epoch,
                batch_idx as u32,
                spec,
                &batch,
                &groups,
                &plan,
                &params,
                &params_old,
                &params_ref,
                cfg,
                &grad,
                if cfg.measure_time {
                    started.elapsed().as_micros() as u64
                } else {
                    0
                },
            )?;
            completions_used += step.completions_kept;
            metrics.push(step);
        }
    }

    Ok(TrainResult {
        params,
        metrics,
        history,
        batches_total,
        batches_skipped,
        completions_used,
    })
}

#[allow(clippy::too_many_arguments)]
fn batch_metrics(
    epoch: u32,
    batch_idx: u32,
    spec: &TaskSpec,
    batch: &[usize],
    groups: &[Group],
    plan: &PruningPlan,
    params: &PolicyParams,
    params_old: &PolicyParams,
    params_ref: &PolicyParams,
    cfg: &TrainConfig,
    grad: &GradientVector,
    wallclock_micros: u64,
) -> Result<StepMetrics> {
    // On enumerable tasks the logged reward is the exact expectation under
    // the behavior policy over the whole batch, so the curve is free of
    // rollout noise and comparable across pruning settings; otherwise it is
    // the sampled mean over the rolled-out completions.
    let mean_reward = if spec.enumerable {
        let mut total = 0.0;
        for &q in batch {
            total += crate::policy::expected_reward(spec, params_old, q)?;
        }
        total / batch.len() as f64
    } else {
        let mut sum = 0.0;
        let mut count = 0usize;
        for group in groups {
            sum += group.rewards.iter().sum::<f64>();
            count += group.rewards.len();
        }
        sum / count.max(1) as f64
    };
    let mut kl_sum = 0.0;
    let mut kl_count = 0usize;
    let mut completions_kept = 0usize;
    let mut pg_loss_acc = 0.0;
    let kept_prompts = plan.prompts.kept_count();
    for group in groups {
        for completion in &group.completions {
            kl_sum += grpo::completion_kl(params, params_ref, completion)?;
            kl_count += 1;
        }
        let cplan = &plan.completions[&group.prompt_id];
        let kept = cplan.kept_count();
        completions_kept += kept;
        let mut inner = 0.0;
        for i in 0..group.len() {
            if !cplan.keep[i] {
                continue;
            }
            inner +=
                cplan.weight[i] * grpo::surrogate_value(params, &group.entry(i), &cfg.surrogate)?;
        }
        let gamma_q = plan
            .prompt_weight(group.prompt_id)
            .expect("rolled-out prompt is in the plan");
        pg_loss_acc += gamma_q * inner / kept as f64;
    }
    Ok(StepMetrics {
        epoch,
        batch: batch_idx,
        mean_reward,
        pg_loss: -pg_loss_acc / kept_prompts.max(1) as f64,
        kl: kl_sum / kl_count.max(1) as f64,
        prompts_kept: kept_prompts,
        prompts_total: batch.len(),
        completions_kept,
        completions_total: batch.len() * cfg.group_size,
        grad_norm: grad.l2_norm(),
        wallclock_micros,
    })
}
