//! Command implementations behind the `dppo` binary: `train`, `verify`,
//! and `pack-bench`. Each command loads a flat-file configuration, echoes
//! the effective configuration into the output directory, and writes its
//! artifacts atomically.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::oracle::{self, PruneLevel, UnbiasednessReport, VarianceReport};
use crate::packing::{self, PackStrategy};
use crate::policy::{self, PolicyParams};
use crate::pruning::{PruneMode, PruningConfig, WeightMode};
use crate::report::{self, SummaryRow};
use crate::rng;
use crate::trainer;

/// Which subcommand to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Train,
    Verify,
    PackBench,
}

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

/// Load, override, and validate the configuration.
fn load_config(config_path: &Path, overrides: Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(config_path)?;
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = overrides.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run a command; returns the process exit code.
pub fn run(kind: CommandKind, config_path: &Path, out_dir: &Path, overrides: Overrides) -> i32 {
    let cfg = match load_config(config_path, overrides) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("error: {err}");
            return 1;
        }
    };
    if let Err(err) = std::fs::create_dir_all(out_dir) {
        eprintln!(
            "error: cannot create output directory {}: {err}",
            out_dir.display()
        );
        return 1;
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
    {
        Ok(pool) => pool,
        Err(err) => {
            eprintln!("error: cannot build worker pool: {err}");
            return 1;
        }
    };
    let outcome = pool.install(|| match kind {
        CommandKind::Train => cmd_train(&cfg, out_dir),
        CommandKind::Verify => cmd_verify(&cfg, out_dir),
        CommandKind::PackBench => cmd_pack_bench(&cfg, out_dir),
    });
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn write_echo(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    report::write_atomic(&out_dir.join("effective.conf"), &cfg.echo())
}

/// Train per the configuration; writes `metrics.jsonl`, `summary.csv`,
/// `curves.csv`, and the effective configuration echo.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<bool> {
    let result = trainer::train(&cfg.task, &cfg.train_config())?;
    if result.batches_skipped * 2 > result.batches_total {
        return Err(Error::DegenerateBatch(format!(
            "degenerate-batch storm: {} of {} batches skipped",
            result.batches_skipped, result.batches_total
        )));
    }
    let wallclock: u64 = result.metrics.iter().map(|m| m.wallclock_micros).sum();
    let summary = SummaryRow {
        r_q: cfg.pruning.r_q,
        r_o: cfg.pruning.r_o,
        seed: cfg.seed,
        final_reward: result.final_mean_reward(),
        completions_used: result.completions_used,
        wallclock_micros: wallclock,
    };
    report::write_atomic(
        &out_dir.join("metrics.jsonl"),
        &report::render_metrics_jsonl(&result.metrics),
    )?;
    report::write_atomic(
        &out_dir.join("summary.csv"),
        &report::render_summary_csv(&summary),
    )?;
    report::write_atomic(
        &out_dir.join("curves.csv"),
        &report::render_curves_csv(&result.metrics),
    )?;
    write_echo(cfg, out_dir)?;
    log::info!(
        "train complete: final reward {:.4}, {} completions used",
        summary.final_reward,
        summary.completions_used
    );
    Ok(true)
}

#[derive(Debug, Serialize)]
struct UnbiasednessCell {
    rate: f64,
    #[serde(flatten)]
    report: UnbiasednessReport,
    tolerance: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct FdCell {
    name: String,
    max_rel_error: f64,
    tolerance: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct FactorRow {
    beta: f64,
    r_q: f64,
    factor: f64,
}

#[derive(Debug, Serialize)]
struct BoundCell {
    beta: f64,
    rate: f64,
    conditions_hold: bool,
    #[serde(flatten)]
    report: VarianceReport,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct LevelVarCell {
    rate: f64,
    level: String,
    prompt_id: Option<usize>,
    var_pruned: f64,
    var_full: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    all_pass: bool,
    unbiasedness: Vec<UnbiasednessCell>,
    finite_diff: Vec<FdCell>,
    variance_factor_table: Vec<FactorRow>,
    variance_bounds: Vec<BoundCell>,
    level_variance: Vec<LevelVarCell>,
}

/// Run the oracle suite and write `verify_report.json`; true iff every
/// check passed.
pub fn cmd_verify(cfg: &RunConfig, out_dir: &Path) -> Result<bool> {
    if !cfg.task.enumerable {
        return Err(Error::Capacity(
            "verify requires an enumerable task (task.enumerable=true)".to_string(),
        ));
    }
    let spec = &cfg.task;
    let cap = cfg.verify.plan_cap;

    // Exact unbiasedness over the full grid of levels, modes, and rates.
    let (groups, candidates, params_new) =
        oracle::sampled_batch_for_checks(spec, cfg.group_size, cfg.pruning.beta, cfg.seed)?;
    let mut unbiasedness = Vec::new();
    for level in [
        PruneLevel::Completion,
        PruneLevel::Prompt,
        PruneLevel::Hierarchical,
    ] {
        for mode in [PruneMode::Bernoulli, PruneMode::DeterministicFraction] {
            for &rate in &cfg.verify.rates {
                let pcfg = PruningConfig {
                    r_o: rate,
                    r_q: rate,
                    beta: cfg.pruning.beta,
                    mode,
                    weighting: WeightMode::InclusionExact,
                };
                let report = oracle::exact_unbiasedness(
                    &groups,
                    &candidates,
                    &params_new,
                    &pcfg,
                    level,
                    cap,
                )?;
                let pass = report.max_abs_deviation < 1e-10;
                unbiasedness.push(UnbiasednessCell {
                    rate,
                    report,
                    tolerance: 1e-10,
                    pass,
                });
            }
        }
    }

    // Finite-difference hygiene.
    let mut finite_diff = Vec::new();
    {
        // Quadratic sanity check: central differences are exact on it.
        let params0 = PolicyParams::zeros(spec);
        let coeffs: Vec<f64> = (0..params0.dimension())
            .map(|j| 0.4 + (j % 5) as f64 * 0.15)
            .collect();
        let analytic = crate::policy::GradientVector::from_vec(
            params0
                .flatten()
                .iter()
                .zip(&coeffs)
                .map(|(x, c)| 2.0 * c * x - 0.3)
                .collect(),
        );
        let c2 = coeffs.clone();
        let err = oracle::finite_diff_max_rel_error(
            spec,
            &params0,
            move |p| {
                p.flatten()
                    .iter()
                    .zip(&c2)
                    .map(|(x, c)| c * x * x - 0.3 * x)
                    .sum()
            },
            &analytic,
            1e-6,
        )?;
        finite_diff.push(FdCell {
            name: "quadratic".to_string(),
            max_rel_error: err,
            tolerance: 1e-9,
            pass: err < 1e-9,
        });
    }
    {
        // Analytic score gradient of one completion against log-prob
        // differences.
        let c = groups[0].completions[0].clone();
        let analytic = policy::score_gradient(&params_new, &c)?;
        let c_for_fd = c.clone();
        let err = oracle::finite_diff_max_rel_error(
            spec,
            &params_new,
            move |p| policy::log_prob(p, &c_for_fd).expect("valid completion"),
            &analytic,
            1e-6,
        )?;
        finite_diff.push(FdCell {
            name: "score_gradient".to_string(),
            max_rel_error: err,
            tolerance: 1e-5,
            pass: err < 1e-5,
        });
    }
    {
        // Full enumerated surrogate at theta = theta_old, plain and through
        // the pruning expectation.
        let pcfg = PruningConfig {
            r_o: 0.5,
            r_q: 0.5,
            beta: cfg.pruning.beta,
            mode: PruneMode::DeterministicFraction,
            weighting: WeightMode::InclusionExact,
        };
        let dist = oracle::DistOracle::new(spec, &params_new, &pcfg)?;
        let analytic = dist.mean_gradient(&params_new)?;
        let d1 = dist.clone();
        let err = oracle::finite_diff_max_rel_error(
            spec,
            &params_new,
            move |p| d1.surrogate_objective(p).expect("enumerable"),
            &analytic,
            1e-6,
        )?;
        finite_diff.push(FdCell {
            name: "surrogate".to_string(),
            max_rel_error: err,
            tolerance: 1e-5,
            pass: err < 1e-5,
        });
        let d2 = dist.clone();
        let err = oracle::finite_diff_max_rel_error(
            spec,
            &params_new,
            move |p| d2.pruned_objective(p).expect("enumerable"),
            &analytic,
            1e-6,
        )?;
        finite_diff.push(FdCell {
            name: "pruned_surrogate".to_string(),
            max_rel_error: err,
            tolerance: 1e-5,
            pass: err < 1e-5,
        });
    }

    // Closed-form variance factor table, anchored at the reference points.
    let mut variance_factor_table = vec![FactorRow {
        beta: 0.5,
        r_q: 0.0,
        factor: oracle::variance_factor(0.5, 0.0)?,
    }];
    for &rate in &cfg.verify.rates {
        variance_factor_table.push(FactorRow {
            beta: 0.5,
            r_q: rate,
            factor: oracle::variance_factor(0.5, rate)?,
        });
    }
    let factor_09 = oracle::variance_factor(0.5, 0.9)?;
    let factor_07 = oracle::variance_factor(0.5, 0.7)?;
    let factor_anchor_pass = (factor_09 - 3.025).abs() < 1e-12 && factor_07 <= 1.42;

    // Total-variance bound and per-level non-increase on the instance built
    // to satisfy the low-score-smaller-gradient conditions.
    let (vspec, vparams) = oracle::variance_test_instance();
    let mut variance_bounds = Vec::new();
    let mut level_variance = Vec::new();
    for rate in [0.7, 0.9] {
        let pcfg = PruningConfig {
            r_o: rate,
            r_q: rate,
            beta: 0.5,
            mode: PruneMode::DeterministicFraction,
            weighting: WeightMode::InclusionExact,
        };
        let dist = oracle::DistOracle::new(&vspec, &vparams, &pcfg)?;
        let conditions = dist.check_low_score_condition(&vparams)?;
        for q in 0..vspec.num_prompts {
            let (pruned, full) = dist.completion_variance(&vparams, q)?;
            level_variance.push(LevelVarCell {
                rate,
                level: "completion".to_string(),
                prompt_id: Some(q),
                var_pruned: pruned,
                var_full: full,
                pass: pruned <= full + 1e-12,
            });
        }
        let (pruned, full) = dist.prompt_variance(&vparams)?;
        level_variance.push(LevelVarCell {
            rate,
            level: "prompt".to_string(),
            prompt_id: None,
            var_pruned: pruned,
            var_full: full,
            pass: pruned <= full + 1e-12,
        });
        let report =
            oracle::empirical_variance(&vspec, &vparams, &pcfg, cfg.verify.trials, cfg.seed)?;
        let factor_matches =
            (report.bound_factor - oracle::variance_factor(0.5, rate)?).abs() < 1e-12;
        let pass = conditions.all_ok() && report.satisfied && factor_matches;
        variance_bounds.push(BoundCell {
            beta: 0.5,
            rate,
            conditions_hold: conditions.all_ok(),
            report,
            pass,
        });
    }

    let all_pass = unbiasedness.iter().all(|c| c.pass)
        && finite_diff.iter().all(|c| c.pass)
        && factor_anchor_pass
        && variance_bounds.iter().all(|c| c.pass)
        && level_variance.iter().all(|c| c.pass);

    let report = VerifyReport {
        all_pass,
        unbiasedness,
        finite_diff,
        variance_factor_table,
        variance_bounds,
        level_variance,
    };
    report::write_atomic(
        &out_dir.join("verify_report.json"),
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&report).expect("report serializes")
        ),
    )?;
    write_echo(cfg, out_dir)?;

    if !report.all_pass {
        for cell in &report.unbiasedness {
            if !cell.pass {
                eprintln!(
                    "FAILED unbiasedness {:?}/{:?} rate {}: deviation {}",
                    cell.report.level, cell.report.mode, cell.rate, cell.report.max_abs_deviation
                );
            }
        }
        for cell in &report.finite_diff {
            if !cell.pass {
                eprintln!(
                    "FAILED finite-diff {}: error {}",
                    cell.name, cell.max_rel_error
                );
            }
        }
        if !factor_anchor_pass {
            eprintln!("FAILED variance factor anchors: {factor_09}, {factor_07}");
        }
        for cell in &report.variance_bounds {
            if !cell.pass {
                eprintln!(
                    "FAILED variance bound at rate {}: var {} vs bound {}",
                    cell.rate, cell.report.var_pruned, cell.report.bound_value
                );
            }
        }
        for cell in &report.level_variance {
            if !cell.pass {
                eprintln!(
                    "FAILED {} variance non-increase at rate {} (prompt {:?})",
                    cell.level, cell.rate, cell.prompt_id
                );
            }
        }
    }
    Ok(report.all_pass)
}

/// Compare packing strategies over synthetic length profiles; writes
/// `pack_bench.csv`.
pub fn cmd_pack_bench(cfg: &RunConfig, out_dir: &Path) -> Result<bool> {
    let mut csv = String::from("profile,strategy,num_prompts,num_sequences,density\n");
    let settings = &cfg.pack_bench;
    if settings.num_prompts > 0 {
        for profile in 0..settings.profiles {
            let mut prng = rng::stream(cfg.seed, "pack_bench", &[profile as u64]);
            let lengths: Vec<usize> = (0..settings.num_prompts)
                .map(|_| prng.gen_range(settings.min_len..=settings.l_max))
                .collect();
            let ids: Vec<usize> = (0..settings.num_prompts).collect();
            for (name, strategy) in [
                ("off", PackStrategy::Off),
                ("first_fit", PackStrategy::FirstFit),
                ("best_fit_decreasing", PackStrategy::BestFitDecreasing),
            ] {
                let packed = packing::pack_with_strategy(
                    &ids,
                    &lengths,
                    settings.l_max,
                    cfg.pack.n_win,
                    strategy,
                )?;
                packed.validate(&lengths, &ids)?;
                let density = packing::density(&packed, &lengths);
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    profile,
                    name,
                    settings.num_prompts,
                    packed.sequences.len(),
                    density
                ));
            }
        }
    }
    report::write_atomic(&out_dir.join("pack_bench.csv"), &csv)?;
    write_echo(cfg, out_dir)?;
    Ok(true)
}

/// Shared argument bundle for binary integration.
pub fn run_from_paths(
    kind: CommandKind,
    config: PathBuf,
    out: PathBuf,
    workers: Option<usize>,
    seed: Option<u64>,
) -> i32 {
    run(kind, &config, &out, Overrides { seed, workers })
}
