//! Sample-size determination by replicated trial simulation.
//!
//! For each completer count on the grid: simulate a trial, estimate the
//! regime by backward induction, estimate its value ratio against the
//! optimal regime, and record success when the ratio clears the performance
//! cutoff. The per-grid-point success probability over replicates is the
//! design's operating characteristic.

use serde::{Deserialize, Serialize};

use crate::datagen::{AssignmentPolicy, DgmConfig};
use crate::design::DesignSpec;
use crate::dtr::{optimal_value, q_learn, value_ratio, QLearnOptions};
use crate::error::{Error, Result};
use crate::runner::{map_replicates, replicate_rng, Parallelism};

/// RNG context tags; the grid point joins the context so streams never
/// collide across runs of different sizes.
const CTX_POWER: u64 = 0x504f5752;
const CTX_CONFIRM: u64 = 0x434f4e46;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerConfig {
    /// Completer counts to evaluate.
    pub n_grid: Vec<usize>,
    /// Performance cutoff on the value ratio.
    pub delta: f64,
    /// Replicates per grid point.
    pub n_replicates: usize,
    /// Replicates for the confirmatory run at a single count.
    pub n_replicates_confirm: usize,
    /// Monte Carlo draws per policy-value estimate.
    pub n_mc_value: usize,
    /// Success-probability target for the confirmation rule.
    pub confirm_target: f64,
    /// Abort when more than this fraction of replicates fail.
    pub max_failure_rate: f64,
    pub dgm: DgmConfig,
    pub master_seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig::paper()
    }
}

impl PowerConfig {
    /// Full-scale settings: 3,500 replicates per grid point, 5,000
    /// confirmatory.
    pub fn paper() -> Self {
        PowerConfig {
            n_grid: vec![300, 400, 500, 600, 630, 700, 800, 900],
            delta: 0.9,
            n_replicates: 3_500,
            n_replicates_confirm: 5_000,
            n_mc_value: 50_000,
            confirm_target: 0.8,
            max_failure_rate: 0.01,
            dgm: DgmConfig::sparse(),
            master_seed: 0,
        }
    }

    /// Laptop-scale settings.
    pub fn desk() -> Self {
        PowerConfig {
            n_replicates: 500,
            n_replicates_confirm: 1_000,
            n_mc_value: 20_000,
            ..PowerConfig::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(Error::Config("n_grid must not be empty".into()));
        }
        if self.n_grid.iter().any(|n| *n == 0) {
            return Err(Error::Config("grid counts must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta {} outside (0, 1]", self.delta)));
        }
        if self.n_replicates == 0 || self.n_replicates_confirm == 0 {
            return Err(Error::Config("replicate counts must be positive".into()));
        }
        if self.n_mc_value == 0 {
            return Err(Error::Config("n_mc_value must be positive".into()));
        }
        if !(self.max_failure_rate >= 0.0 && self.max_failure_rate < 1.0) {
            return Err(Error::Config("max_failure_rate outside [0, 1)".into()));
        }
        self.dgm.validate()
    }
}

/// One replicate's outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub ratio: f64,
    pub success: bool,
}

/// Aggregate summary for one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCell {
    pub n_completers: usize,
    pub n_replicates: usize,
    pub n_failures: usize,
    pub successes: usize,
    /// Estimated success probability.
    pub p_hat: f64,
    /// Binomial standard error `sqrt(p(1-p)/R)`.
    pub mc_se: f64,
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_q1: f64,
    pub ratio_median: f64,
    pub ratio_q3: f64,
    pub ratio_max: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    pub delta: f64,
    pub v_star: f64,
    pub cells: Vec<PowerCell>,
    /// Per-replicate ratios, grouped by grid point in replicate order.
    pub replicates: Vec<(usize, Vec<ReplicateOutcome>)>,
}

/// Confirmation-rule outcome at a single completer count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confirmation {
    pub cell: PowerCell,
    pub target: f64,
    /// Whether `p_hat - 2 * mc_se >= target`.
    pub passes_two_se_rule: bool,
}

/// Type-7 quantile of a sorted sample.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn run_grid_point(
    config: &PowerConfig,
    n_completers: usize,
    n_replicates: usize,
    context: u64,
    parallelism: Parallelism,
) -> Result<(PowerCell, Vec<ReplicateOutcome>)> {
    let start = std::time::Instant::now();
    let design = DesignSpec::for_covariates(config.dgm.n_covariates());
    let options = QLearnOptions {
        mode: config.dgm.stage2_mode,
        ..QLearnOptions::default()
    };
    let mut dgm = config.dgm.clone();
    dgm.n_completers = n_completers;

    let raw: Vec<Result<ReplicateOutcome>> =
        map_replicates(n_replicates, parallelism, |replicate| {
            let mut rng = replicate_rng(
                config.master_seed,
                context ^ (n_completers as u64).rotate_left(20),
                replicate as u64,
            );
            let records = dgm.simulate_trial(&AssignmentPolicy::UniformFeasible, &mut rng)?;
            let fit = q_learn(&records, &design, &options, &mut rng)?;
            let ratio = value_ratio(&fit.policy, &dgm, config.n_mc_value, &mut rng)?;
            Ok(ReplicateOutcome {
                replicate,
                ratio: ratio.ratio,
                success: ratio.ratio >= config.delta,
            })
        });

    let mut outcomes = Vec::with_capacity(raw.len());
    let mut n_failures = 0usize;
    for item in raw {
        match item {
            Ok(outcome) => outcomes.push(outcome),
            Err(_) => n_failures += 1,
        }
    }
    let limit = (config.max_failure_rate * n_replicates as f64).floor() as usize;
    if n_failures > limit {
        return Err(Error::ReplicateFailures {
            failed: n_failures,
            total: n_replicates,
            limit,
        });
    }
    if outcomes.is_empty() {
        return Err(Error::Empty("successful replicates"));
    }

    let r = outcomes.len() as f64;
    let successes = outcomes.iter().filter(|o| o.success).count();
    let p_hat = successes as f64 / r;
    let mut sorted: Vec<f64> = outcomes.iter().map(|o| o.ratio).collect();
    sorted.sort_by(f64::total_cmp);
    let cell = PowerCell {
        n_completers,
        n_replicates: outcomes.len(),
        n_failures,
        successes,
        p_hat,
        mc_se: (p_hat * (1.0 - p_hat) / r).sqrt(),
        ratio_mean: sorted.iter().sum::<f64>() / r,
        ratio_min: sorted[0],
        ratio_q1: quantile(&sorted, 0.25),
        ratio_median: quantile(&sorted, 0.5),
        ratio_q3: quantile(&sorted, 0.75),
        ratio_max: sorted[sorted.len() - 1],
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((cell, outcomes))
}

/// Runs the full grid.
///
/// Fails fast when the configured model has no strictly positive optimal
/// value: a null model makes every regime trivially optimal and the ratio
/// undefined.
pub fn run_power(config: &PowerConfig, parallelism: Parallelism) -> Result<PowerResult> {
    config.validate()?;
    let v_star = optimal_value(&config.dgm)?;
    if !(v_star > 0.0) {
        return Err(Error::Config(format!(
            "optimal regime value {v_star} is not strictly positive under the configured model"
        )));
    }
    let mut cells = Vec::with_capacity(config.n_grid.len());
    let mut replicates = Vec::with_capacity(config.n_grid.len());
    for &n in &config.n_grid {
        let (cell, outcomes) =
            run_grid_point(config, n, config.n_replicates, CTX_POWER, parallelism)?;
        cells.push(cell);
        replicates.push((n, outcomes));
    }
    Ok(PowerResult {
        delta: config.delta,
        v_star,
        cells,
        replicates,
    })
}

/// Confirmatory run at one completer count with the larger replicate budget,
/// reporting whether the estimate clears the target by two standard errors.
pub fn confirm_at(
    n_completers: usize,
    config: &PowerConfig,
    parallelism: Parallelism,
) -> Result<Confirmation> {
    config.validate()?;
    let v_star = optimal_value(&config.dgm)?;
    if !(v_star > 0.0) {
        return Err(Error::Config(format!(
            "optimal regime value {v_star} is not strictly positive under the configured model"
        )));
    }
    let (cell, _) = run_grid_point(
        config,
        n_completers,
        config.n_replicates_confirm,
        CTX_CONFIRM,
        parallelism,
    )?;
    let passes = cell.p_hat - 2.0 * cell.mc_se >= config.confirm_target;
    Ok(Confirmation {
        cell,
        target: config.confirm_target,
        passes_two_se_rule: passes,
    })
}
