//! Randomization-imbalance study: repeated enrollments through the
//! minimization algorithm over site-correlated covariates, summarized by
//! three maximal imbalance metrics.

use serde::{Deserialize, Serialize};

use crate::datagen::{draw_site_correlated_factors, SiteCovariateConfig};
use crate::error::{Error, Result};
use crate::model::N_ARMS;
use crate::randomizer::{assign_at_site, MinimizationConfig, MinimizationState};
use crate::runner::{map_replicates, replicate_rng, Parallelism};

const CTX_IMBALANCE: u64 = 0x494d4241;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImbalanceConfig {
    pub n_participants: usize,
    pub n_sites: usize,
    pub icc: f64,
    pub marginal_p: f64,
    /// Number of balancing factors per setting.
    pub factor_counts: Vec<usize>,
    pub n_replicates: usize,
    pub rho: f64,
    /// Probability that a participant carries one excluded arm (chosen
    /// uniformly). Must stay below (K-1)/K, past which balance is impossible.
    pub exclusion_prevalence: f64,
    pub master_seed: u64,
}

impl Default for ImbalanceConfig {
    fn default() -> Self {
        ImbalanceConfig {
            n_participants: 600,
            n_sites: 8,
            icc: 0.05,
            marginal_p: 0.5,
            factor_counts: vec![2, 4, 6, 8],
            n_replicates: 10_000,
            rho: 2.0 / 3.0,
            exclusion_prevalence: 0.0,
            master_seed: 0,
        }
    }
}

impl ImbalanceConfig {
    /// Robustness preset with a 20% exclusion rate.
    pub fn exclusion_stress() -> Self {
        ImbalanceConfig {
            exclusion_prevalence: 0.2,
            ..ImbalanceConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor_counts.is_empty() {
            return Err(Error::Config("factor_counts must not be empty".into()));
        }
        if self.factor_counts.iter().any(|f| *f == 0) {
            return Err(Error::Config("factor counts must be positive".into()));
        }
        if self.n_replicates == 0 || self.n_participants == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        let bound = (N_ARMS as f64 - 1.0) / N_ARMS as f64;
        if !(self.exclusion_prevalence >= 0.0 && self.exclusion_prevalence < bound) {
            return Err(Error::Config(format!(
                "exclusion prevalence {} outside [0, {bound})",
                self.exclusion_prevalence
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho {} outside (0, 1]", self.rho)));
        }
        SiteCovariateConfig {
            n_sites: self.n_sites,
            icc: self.icc,
            marginal_p: self.marginal_p,
            n_factors: self.factor_counts[0],
        }
        .validate()
    }
}

/// Largest difference between any two arm totals.
pub fn study_wide_imbalance(arm_totals: &[u64]) -> u64 {
    let max = arm_totals.iter().copied().max().unwrap_or(0);
    let min = arm_totals.iter().copied().min().unwrap_or(0);
    max - min
}

/// Largest arm-pair difference within any (factor, level) cell.
///
/// `level_counts[arm][factor][level]` with binary levels 0/1.
pub fn factor_level_imbalance(level_counts: &[Vec<[u64; 2]>]) -> u64 {
    let n_arms = level_counts.len();
    let n_factors = level_counts.first().map_or(0, Vec::len);
    let mut worst = 0u64;
    for p in 0..n_factors {
        for level in 0..2 {
            for k in 0..n_arms {
                for k2 in (k + 1)..n_arms {
                    let diff =
                        level_counts[k][p][level].abs_diff(level_counts[k2][p][level]);
                    worst = worst.max(diff);
                }
            }
        }
    }
    worst
}

/// Largest within-site arm-pair difference, maximized over sites.
///
/// `site_counts[site][arm]`.
pub fn site_treatment_imbalance(site_counts: &[Vec<u64>]) -> u64 {
    site_counts
        .iter()
        .map(|arms| study_wide_imbalance(arms))
        .max()
        .unwrap_or(0)
}

/// The three metrics for one simulated enrollment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub study_wide: u64,
    pub factor_level: u64,
    pub site_treatment: u64,
}

/// Distribution summary of one metric across replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub min: u64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: u64,
    /// Fraction of replicates with the metric at 10 or more.
    pub p_ge_10: f64,
}

fn summarize(values: &mut [u64]) -> MetricSummary {
    values.sort_unstable();
    let q = |p: f64| -> f64 {
        let h = (values.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        values[lo] as f64 + (h - lo as f64) * (values[hi] as f64 - values[lo] as f64)
    };
    MetricSummary {
        min: values[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: values[values.len() - 1],
        p_ge_10: values.iter().filter(|v| **v >= 10).count() as f64 / values.len() as f64,
    }
}

/// Results for one factor-count setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub n_factors: usize,
    pub study_wide: MetricSummary,
    pub factor_level: MetricSummary,
    pub site_treatment: MetricSummary,
    pub replicates: Vec<ReplicateMetrics>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub settings: Vec<SettingReport>,
    /// Fraction of all replicates, pooled across settings, with study-wide
    /// imbalance of 10 or more.
    pub pooled_study_wide_p_ge_10: f64,
}

/// Simulates one enrollment and returns the three metrics.
pub fn simulate_enrollment(
    config: &ImbalanceConfig,
    n_factors: usize,
    rng: &mut impl rand::Rng,
) -> Result<ReplicateMetrics> {
    let site_config = SiteCovariateConfig {
        n_sites: config.n_sites,
        icc: config.icc,
        marginal_p: config.marginal_p,
        n_factors,
    };
    let panel = draw_site_correlated_factors(&site_config, config.n_participants, rng)?;
    let minim = MinimizationConfig::uniform_weights(N_ARMS, n_factors, config.rho);
    let mut state = MinimizationState::new(N_ARMS, n_factors);
    let all_arms: Vec<usize> = (0..N_ARMS).collect();

    for i in 0..config.n_participants {
        let feasible: Vec<usize> = if config.exclusion_prevalence > 0.0
            && rng.random::<f64>() < config.exclusion_prevalence
        {
            let excluded = rng.random_range(0..N_ARMS);
            all_arms.iter().copied().filter(|k| *k != excluded).collect()
        } else {
            all_arms.clone()
        };
        assign_at_site(
            &mut state,
            &panel.factors[i],
            &feasible,
            Some(panel.sites[i] as usize),
            &minim,
            rng,
        )?;
    }

    let level_counts: Vec<Vec<[u64; 2]>> = (0..N_ARMS)
        .map(|k| {
            (0..n_factors)
                .map(|p| {
                    let ones = state.factor_count(k, p);
                    [state.arm_totals()[k] - ones, ones]
                })
                .collect()
        })
        .collect();

    let metrics = ReplicateMetrics {
        study_wide: study_wide_imbalance(state.arm_totals()),
        factor_level: factor_level_imbalance(&level_counts),
        site_treatment: site_treatment_imbalance(state.site_counts()),
    };
    debug_assert!(metrics.factor_level <= config.n_participants as u64);
    Ok(metrics)
}

/// Runs every factor-count setting.
pub fn run_imbalance(
    config: &ImbalanceConfig,
    parallelism: Parallelism,
) -> Result<ImbalanceReport> {
    config.validate()?;
    let mut settings = Vec::with_capacity(config.factor_counts.len());
    let mut pooled_hits = 0usize;
    let mut pooled_total = 0usize;
    for &n_factors in &config.factor_counts {
        let start = std::time::Instant::now();
        let raw: Vec<Result<ReplicateMetrics>> =
            map_replicates(config.n_replicates, parallelism, |replicate| {
                let mut rng = replicate_rng(
                    config.master_seed,
                    CTX_IMBALANCE ^ (n_factors as u64).rotate_left(32),
                    replicate as u64,
                );
                simulate_enrollment(config, n_factors, &mut rng)
            });
        let replicates: Vec<ReplicateMetrics> = raw.into_iter().collect::<Result<_>>()?;
        pooled_hits += replicates.iter().filter(|m| m.study_wide >= 10).count();
        pooled_total += replicates.len();

        let mut study: Vec<u64> = replicates.iter().map(|m| m.study_wide).collect();
        let mut factor: Vec<u64> = replicates.iter().map(|m| m.factor_level).collect();
        let mut site: Vec<u64> = replicates.iter().map(|m| m.site_treatment).collect();
        settings.push(SettingReport {
            n_factors,
            study_wide: summarize(&mut study),
            factor_level: summarize(&mut factor),
            site_treatment: summarize(&mut site),
            replicates,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(ImbalanceReport {
        settings,
        pooled_study_wide_p_ge_10: pooled_hits as f64 / pooled_total as f64,
    })
}
