//! Run configuration: flat `key=value` text with `#` comments and dotted
//! section prefixes (e.g. `pruning.r_o=0.5`).
//!
//! Every key has a default, unknown keys are rejected with their line
//! number, and the effective configuration can be echoed back in a
//! canonical form that reparses to the identical configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::env::TaskSpec;
use crate::error::{Error, Result};
use crate::grpo::SurrogateConfig;
use crate::packing::PackStrategy;
use crate::pruning::{PruneMode, PruningConfig, WeightMode};
use crate::trainer::{PackSettings, TrainConfig};

/// Oracle-suite settings for the `verify` command.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifySettings {
    /// Monte-Carlo trials for the variance bound checks.
    pub trials: usize,
    /// Pruning rates for the unbiasedness grid.
    pub rates: Vec<f64>,
    /// Plan-enumeration cap.
    pub plan_cap: u64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            trials: 100_000,
            rates: vec![0.3, 0.5, 0.7, 0.9],
            plan_cap: 1_000_000,
        }
    }
}

/// Synthetic length profiles for the `pack-bench` command.
#[derive(Debug, Clone, PartialEq)]
pub struct PackBenchSettings {
    pub profiles: usize,
    pub num_prompts: usize,
    pub min_len: usize,
    pub l_max: usize,
}

impl Default for PackBenchSettings {
    fn default() -> Self {
        PackBenchSettings {
            profiles: 20,
            num_prompts: 200,
            min_len: 2,
            l_max: 16,
        }
    }
}

/// The full run configuration shared by all commands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    /// Measure real wall time into outputs. Off by default so identical
    /// config + seed reruns byte-identically.
    pub timing_real: bool,
    pub task: TaskSpec,
    pub epochs: u32,
    pub group_size: usize,
    pub learning_rate: f64,
    pub batch_prompts: usize,
    pub init_scale: f64,
    pub surrogate: SurrogateConfig,
    pub pruning: PruningConfig,
    pub pack: PackSettings,
    pub verify: VerifySettings,
    pub pack_bench: PackBenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            seed: 42,
            workers: 1,
            timing_real: false,
            task: TaskSpec::desk_default(),
            epochs: train.epochs,
            group_size: train.group_size,
            learning_rate: train.learning_rate,
            batch_prompts: train.batch_prompts,
            init_scale: train.init_scale,
            surrogate: train.surrogate,
            pruning: train.pruning,
            pack: train.pack,
            verify: VerifySettings::default(),
            pack_bench: PackBenchSettings::default(),
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        Error::config(
            Some(line),
            format!("cannot parse value '{value}' for key '{key}'"),
        )
    })
}

fn parse_bool(value: &str, line: usize, key: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(
            Some(line),
            format!("key '{key}' expects true or false (got '{other}')"),
        )),
    }
}

fn parse_usize_list(value: &str, line: usize, key: &str) -> Result<Vec<usize>> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|item| parse_scalar::<usize>(item, line, key))
        .collect()
}

fn parse_f64_list(value: &str, line: usize, key: &str) -> Result<Vec<f64>> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|item| parse_scalar::<f64>(item, line, key))
        .collect()
}

/// Target map syntax: prompts separated by `;`, tokens by `,`, e.g.
/// `0,1;1,2;2,0`.
fn parse_target_map(value: &str, line: usize, key: &str) -> Result<Vec<Vec<usize>>> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(';')
        .map(|row| parse_usize_list(row, line, key))
        .collect()
}

fn format_usize_list(items: &[usize]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn format_f64_list(items: &[f64]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn format_target_map(map: &[Vec<usize>]) -> String {
    map.iter()
        .map(|row| format_usize_list(row))
        .collect::<Vec<_>>()
        .join(";")
}

impl RunConfig {
    /// Parse a configuration, overlaying the given text onto defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut key_lines: BTreeMap<String, usize> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let without_comment = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let trimmed = without_comment.trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| {
                Error::config(Some(line), format!("expected key=value, got '{trimmed}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value, line)?;
            key_lines.insert(key.to_string(), line);
        }
        if let Err(err) = cfg.validate() {
            // Attach the offending line when the message names a known key.
            let message = err.to_string();
            for (key, &line) in &key_lines {
                let field = key.rsplit('.').next().unwrap_or(key);
                if message.contains(key) || message.contains(field) {
                    return Err(Error::config(Some(line), message));
                }
            }
            return Err(err);
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "seed" => self.seed = parse_scalar(value, line, key)?,
            "workers" => self.workers = parse_scalar(value, line, key)?,
            "timing" => {
                self.timing_real = match value {
                    "none" => false,
                    "real" => true,
                    other => {
                        return Err(Error::config(
                            Some(line),
                            format!("timing expects none or real (got '{other}')"),
                        ))
                    }
                }
            }
            "task.num_prompts" => self.task.num_prompts = parse_scalar(value, line, key)?,
            "task.vocab_size" => self.task.vocab_size = parse_scalar(value, line, key)?,
            "task.completion_len" => self.task.completion_len = parse_scalar(value, line, key)?,
            "task.prompt_lengths" => self.task.prompt_lengths = parse_usize_list(value, line, key)?,
            "task.target_map" => self.task.target_map = parse_target_map(value, line, key)?,
            "task.enumerable" => self.task.enumerable = parse_bool(value, line, key)?,
            "task.enumeration_cap" => self.task.enumeration_cap = parse_scalar(value, line, key)?,
            "train.epochs" => self.epochs = parse_scalar(value, line, key)?,
            "train.group_size" => self.group_size = parse_scalar(value, line, key)?,
            "train.learning_rate" => self.learning_rate = parse_scalar(value, line, key)?,
            "train.batch_prompts" => self.batch_prompts = parse_scalar(value, line, key)?,
            "train.init_scale" => self.init_scale = parse_scalar(value, line, key)?,
            "train.clip_epsilon" => self.surrogate.clip_epsilon = parse_scalar(value, line, key)?,
            "train.kl_beta" => self.surrogate.kl_beta = parse_scalar(value, line, key)?,
            "train.use_clip" => self.surrogate.use_clip = parse_bool(value, line, key)?,
            "train.token_level" => self.surrogate.token_level = parse_bool(value, line, key)?,
            "pruning.r_o" => self.pruning.r_o = parse_scalar(value, line, key)?,
            "pruning.r_q" => self.pruning.r_q = parse_scalar(value, line, key)?,
            "pruning.beta" => self.pruning.beta = parse_scalar(value, line, key)?,
            "pruning.prune_mode" => {
                self.pruning.mode = match value {
                    "bernoulli" => PruneMode::Bernoulli,
                    "deterministic_fraction" => PruneMode::DeterministicFraction,
                    other => {
                        return Err(Error::config(
                            Some(line),
                            format!(
                                "pruning.prune_mode expects bernoulli or \
                                 deterministic_fraction (got '{other}')"
                            ),
                        ))
                    }
                }
            }
            "pruning.weight_mode" => {
                self.pruning.weighting = match value {
                    "inclusion_exact" => WeightMode::InclusionExact,
                    "nominal" => WeightMode::Nominal,
                    other => {
                        return Err(Error::config(
                            Some(line),
                            format!(
                                "pruning.weight_mode expects inclusion_exact or nominal \
                                 (got '{other}')"
                            ),
                        ))
                    }
                }
            }
            "packing.l_max" => self.pack.l_max = parse_scalar(value, line, key)?,
            "packing.n_win" => self.pack.n_win = parse_scalar(value, line, key)?,
            "packing.pack_strategy" => {
                self.pack.strategy = match value {
                    "off" => PackStrategy::Off,
                    "first_fit" => PackStrategy::FirstFit,
                    "best_fit_decreasing" => PackStrategy::BestFitDecreasing,
                    other => {
                        return Err(Error::config(
                            Some(line),
                            format!(
                                "packing.pack_strategy expects off, first_fit or \
                                 best_fit_decreasing (got '{other}')"
                            ),
                        ))
                    }
                }
            }
            "verify.trials" => self.verify.trials = parse_scalar(value, line, key)?,
            "verify.rates" => self.verify.rates = parse_f64_list(value, line, key)?,
            "verify.plan_cap" => self.verify.plan_cap = parse_scalar(value, line, key)?,
            "pack_bench.profiles" => self.pack_bench.profiles = parse_scalar(value, line, key)?,
            "pack_bench.num_prompts" => {
                self.pack_bench.num_prompts = parse_scalar(value, line, key)?
            }
            "pack_bench.min_len" => self.pack_bench.min_len = parse_scalar(value, line, key)?,
            "pack_bench.l_max" => self.pack_bench.l_max = parse_scalar(value, line, key)?,
            other => {
                return Err(Error::config(
                    Some(line),
                    format!("unknown configuration key '{other}'"),
                ))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train_config().validate()?;
        if self.workers == 0 {
            return Err(Error::invalid_input("workers must be >= 1"));
        }
        if self.verify.trials < 10_000 {
            return Err(Error::invalid_input("verify.trials must be at least 10000"));
        }
        if self.verify.rates.is_empty() {
            return Err(Error::invalid_input("verify.rates must be non-empty"));
        }
        for &r in &self.verify.rates {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid_input(format!(
                    "verify.rates entries must be in [0, 1) (got {r})"
                )));
            }
        }
        if self.pack_bench.min_len == 0 || self.pack_bench.min_len > self.pack_bench.l_max {
            return Err(Error::invalid_input(
                "pack_bench.min_len must be in [1, pack_bench.l_max]",
            ));
        }
        Ok(())
    }

    /// Assemble the trainer configuration.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            group_size: self.group_size,
            learning_rate: self.learning_rate,
            surrogate: self.surrogate,
            pruning: self.pruning,
            seed: self.seed,
            batch_prompts: self.batch_prompts,
            pack: self.pack,
            init_scale: self.init_scale,
            measure_time: self.timing_real,
        }
    }

    /// Canonical flat rendering; `parse_str(echo(cfg)) == cfg`.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            writeln!(out, "{key}={value}").expect("writing to a String cannot fail");
        };
        push("seed", self.seed.to_string());
        push("workers", self.workers.to_string());
        push(
            "timing",
            if self.timing_real { "real" } else { "none" }.to_string(),
        );
        push("task.num_prompts", self.task.num_prompts.to_string());
        push("task.vocab_size", self.task.vocab_size.to_string());
        push("task.completion_len", self.task.completion_len.to_string());
        push(
            "task.prompt_lengths",
            format_usize_list(&self.task.prompt_lengths),
        );
        push("task.target_map", format_target_map(&self.task.target_map));
        push("task.enumerable", self.task.enumerable.to_string());
        push(
            "task.enumeration_cap",
            self.task.enumeration_cap.to_string(),
        );
        push("train.epochs", self.epochs.to_string());
        push("train.group_size", self.group_size.to_string());
        push("train.learning_rate", self.learning_rate.to_string());
        push("train.batch_prompts", self.batch_prompts.to_string());
        push("train.init_scale", self.init_scale.to_string());
        push(
            "train.clip_epsilon",
            self.surrogate.clip_epsilon.to_string(),
        );
        push("train.kl_beta", self.surrogate.kl_beta.to_string());
        push("train.use_clip", self.surrogate.use_clip.to_string());
        push("train.token_level", self.surrogate.token_level.to_string());
        push("pruning.r_o", self.pruning.r_o.to_string());
        push("pruning.r_q", self.pruning.r_q.to_string());
        push("pruning.beta", self.pruning.beta.to_string());
        push(
            "pruning.prune_mode",
            match self.pruning.mode {
                PruneMode::Bernoulli => "bernoulli",
                PruneMode::DeterministicFraction => "deterministic_fraction",
            }
            .to_string(),
        );
        push(
            "pruning.weight_mode",
            match self.pruning.weighting {
                WeightMode::InclusionExact => "inclusion_exact",
                WeightMode::Nominal => "nominal",
            }
            .to_string(),
        );
        push("packing.l_max", self.pack.l_max.to_string());
        push("packing.n_win", self.pack.n_win.to_string());
        push(
            "packing.pack_strategy",
            match self.pack.strategy {
                PackStrategy::Off => "off",
                PackStrategy::FirstFit => "first_fit",
                PackStrategy::BestFitDecreasing => "best_fit_decreasing",
            }
            .to_string(),
        );
        push("verify.trials", self.verify.trials.to_string());
        push("verify.rates", format_f64_list(&self.verify.rates));
        push("verify.plan_cap", self.verify.plan_cap.to_string());
        push("pack_bench.profiles", self.pack_bench.profiles.to_string());
        push(
            "pack_bench.num_prompts",
            self.pack_bench.num_prompts.to_string(),
        );
        push("pack_bench.min_len", self.pack_bench.min_len.to_string());
        push("pack_bench.l_max", self.pack_bench.l_max.to_string());
        out
    }
}
