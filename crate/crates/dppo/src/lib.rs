//! Dynamic pruning policy optimization on enumerable toy tasks.
//!
//! Group-relative policy-gradient training over a tabular softmax policy,
//! with hierarchical pruning at the prompt and completion levels and
//! inverse-inclusion-probability rescaling that keeps the gradient
//! estimator unbiased. Because the synthetic tasks have fully enumerable
//! completion spaces, the unbiasedness and variance properties are not just
//! tested statistically: the [`oracle`] module enumerates every pruning
//! plan (or the whole completion distribution) and checks them exactly.
//!
//! Modules:
//! - [`env`]: synthetic prompt/reward tasks with enumerable completions.
//! - [`policy`]: tabular softmax policy with exact log-probs and scores.
//! - [`grpo`]: advantages, ratios, clipped surrogate, KL, gradient kernel.
//! - [`pruning`]: candidate selection, drop mechanics, rescaling weights.
//! - [`packing`]: window-based greedy sequence packing.
//! - [`trainer`]: the end-to-end training loop.
//! - [`oracle`]: plan enumeration, variance bounds, finite differences.
//! - [`config`] / [`cli`] / [`report`]: run configuration and artifacts.

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod grpo;
pub mod oracle;
pub mod packing;
pub mod policy;
pub mod pruning;
pub mod report;
pub mod rng;
pub mod trainer;

pub use config::RunConfig;
pub use env::{enumerate_completions, reward, Completion, TaskSpec};
pub use error::{Error, Result};
pub use grpo::{compute_advantages, Group, SurrogateConfig};
pub use oracle::{empirical_variance, exact_unbiasedness, variance_factor, DistOracle, PruneLevel};
pub use packing::{density, pack, PackStrategy, PackedBatch};
pub use policy::{log_prob, sample, score_gradient, GradientVector, PolicyParams};
pub use pruning::{
    completion_threshold, prune_completions, prune_prompts, select_prompt_candidates,
    update_history, HistoryStore, PruneMode, PruningConfig, PruningPlan, WeightMode,
};
pub use trainer::{estimate_gradient, train, StepMetrics, TrainConfig, TrainResult};
