//! Synthetic trial data from configurable two-stage outcome models, plus
//! site-correlated binary covariates for randomization studies.
//!
//! The default (sparse) configuration draws ten covariates: five Bernoulli
//! variables recoded to {-1, +1} with success probabilities 0.5..0.9 and five
//! Normal(0, 0.5) variables. The first covariate tailors the second-stage
//! outcome through an interaction with one arm, the next two are prognostic,
//! and the rest are nuisance. Stage outcomes are
//!
//! ```text
//! y1 = q1(z, a1) + e1      y2 = q2(z, active set) + e2      e_j ~ N(0, noise_sd)
//! ```
//!
//! on the standardized effect-size scale.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    feasible_stage2, unrestricted_stage2, Arm, ArmSet, ParticipantRecord, ResponderCategory,
    Stage2Action, TreatmentPolicy, N_ARMS,
};
use crate::randomizer::{assign, MinimizationConfig, MinimizationState};

/// How stage-2 actions are drawn in simulation and constrained in estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Mode {
    /// Stage-2 actions are drawn uniformly over the full action space
    /// (keep, every augment, every switch) independent of interim response.
    Unrestricted,
    /// Interim response maps to a responder category through quartiles of
    /// the stage-1 outcome marginal, and stage-2 actions are drawn uniformly
    /// from the trial's feasible set for that category.
    ResponderDriven,
}

/// The stage-2 actions available under a mode.
pub fn stage2_action_space(
    mode: Stage2Mode,
    a1: Arm,
    responder: ResponderCategory,
    excluded: Option<Arm>,
) -> Vec<Stage2Action> {
    match mode {
        Stage2Mode::Unrestricted => unrestricted_stage2(a1),
        Stage2Mode::ResponderDriven => feasible_stage2(a1, responder, excluded),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Few covariates with larger effects (the reported, most challenging case).
    Sparse,
    /// Many covariates with smaller effects; no published targets.
    Dense,
}

/// A covariate-by-arm interaction term in the outcome models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailoringTerm {
    pub covariate: usize,
    pub arm: Arm,
    pub coef: f64,
}

/// A covariate main effect on the outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrognosticTerm {
    pub covariate: usize,
    pub coef: f64,
}

/// A pairwise treatment-combination effect in the stage-2 outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComboCoef {
    pub a: Arm,
    pub b: Arm,
    pub coef: f64,
}

/// Data-generating model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgmConfig {
    /// Number of completers per simulated trial.
    pub n_completers: usize,
    /// Main effects for the four arms (esc, act, dul, ebem).
    pub main_effects: [f64; 4],
    /// Coefficient of the first covariate by the EBEM indicator.
    pub tailoring_coef: f64,
    /// Coefficients of the second and third covariates.
    pub prognostic_coefs: (f64, f64),
    /// Pairwise combination effects applied when both arms are active.
    pub combo_coefs: Vec<ComboCoef>,
    /// Success probabilities of the Bernoulli covariates (recoded to +-1).
    pub bern_probs: Vec<f64>,
    /// Number of Normal(0, normal_sd) covariates.
    pub n_normal: usize,
    /// Standard deviation of the normal covariates.
    pub normal_sd: f64,
    /// If set, overrides `normal_sd` with `sqrt(normal_variance)`.
    pub normal_variance: Option<f64>,
    /// Standard deviation of the stage outcome noise.
    pub noise_sd: f64,
    pub scenario: Scenario,
    pub stage2_mode: Stage2Mode,
    /// Additional covariate-by-arm interactions (dense scenario).
    pub extra_tailoring: Vec<TailoringTerm>,
    /// Additional covariate main effects (dense scenario).
    pub extra_prognostic: Vec<PrognosticTerm>,
}

impl Default for DgmConfig {
    fn default() -> Self {
        DgmConfig::sparse()
    }
}

impl DgmConfig {
    /// The sparse model: one tailoring covariate, two prognostic covariates.
    pub fn sparse() -> Self {
        DgmConfig {
            n_completers: 630,
            main_effects: [0.1, 0.25, 0.3, 0.4],
            tailoring_coef: 0.3,
            prognostic_coefs: (0.25, -0.25),
            combo_coefs: vec![
                ComboCoef { a: Arm::Act, b: Arm::Dul, coef: -0.1 },
                ComboCoef { a: Arm::Act, b: Arm::Ebem, coef: -1.0 },
                ComboCoef { a: Arm::Dul, b: Arm::Ebem, coef: -0.1 },
            ],
            bern_probs: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            n_normal: 5,
            normal_sd: 0.5,
            normal_variance: None,
            noise_sd: 1.0,
            scenario: Scenario::Sparse,
            stage2_mode: Stage2Mode::Unrestricted,
            extra_tailoring: Vec::new(),
            extra_prognostic: Vec::new(),
        }
    }

    /// The dense preset: smaller effects spread over more covariates.
    pub fn dense() -> Self {
        DgmConfig {
            tailoring_coef: 0.1,
            prognostic_coefs: (0.1, -0.1),
            extra_tailoring: vec![
                TailoringTerm { covariate: 3, arm: Arm::Dul, coef: 0.1 },
                TailoringTerm { covariate: 3, arm: Arm::Ebem, coef: -0.1 },
                TailoringTerm { covariate: 4, arm: Arm::Act, coef: 0.1 },
                TailoringTerm { covariate: 4, arm: Arm::Dul, coef: -0.1 },
            ],
            extra_prognostic: vec![
                PrognosticTerm { covariate: 5, coef: 0.1 },
                PrognosticTerm { covariate: 6, coef: -0.1 },
                PrognosticTerm { covariate: 7, coef: 0.05 },
                PrognosticTerm { covariate: 8, coef: -0.05 },
            ],
            scenario: Scenario::Dense,
            ..DgmConfig::sparse()
        }
    }

    pub fn n_binary(&self) -> usize {
        self.bern_probs.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.bern_probs.len() + self.n_normal
    }

    /// Effective standard deviation of the normal covariates.
    pub fn normal_scale(&self) -> f64 {
        match self.normal_variance {
            Some(v) => v.sqrt(),
            None => self.normal_sd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_completers == 0 {
            return Err(Error::Config("n_completers must be positive".into()));
        }
        if self.bern_probs.is_empty() {
            return Err(Error::Config("at least one binary covariate required".into()));
        }
        if self.bern_probs.iter().any(|p| !(*p >= 0.5 && *p <= 0.9)) {
            return Err(Error::Config(
                "binary covariate probabilities must lie in [0.5, 0.9]".into(),
            ));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config("noise_sd must be nonnegative".into()));
        }
        if !(self.normal_scale() >= 0.0) {
            return Err(Error::Config("normal covariate scale must be nonnegative".into()));
        }
        if self.n_covariates() < 3 {
            return Err(Error::Config(
                "the model references covariates 0..=2; need at least three".into(),
            ));
        }
        for t in &self.extra_tailoring {
            if t.covariate >= self.n_covariates() {
                return Err(Error::Config(format!(
                    "tailoring covariate index {} out of range",
                    t.covariate
                )));
            }
        }
        for p in &self.extra_prognostic {
            if p.covariate >= self.n_covariates() {
                return Err(Error::Config(format!(
                    "prognostic covariate index {} out of range",
                    p.covariate
                )));
            }
        }
        for c in &self.combo_coefs {
            if c.a == c.b {
                return Err(Error::Config("combination term needs two distinct arms".into()));
            }
        }
        Ok(())
    }

    /// Draws one covariate vector: binaries (recoded to +-1) then normals.
    pub fn draw_covariates<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.n_covariates());
        for &p in &self.bern_probs {
            z.push(if rng.random::<f64>() < p { 1.0 } else { -1.0 });
        }
        let scale = self.normal_scale();
        if scale > 0.0 {
            let normal = Normal::new(0.0, scale).expect("valid normal scale");
            for _ in 0..self.n_normal {
                z.push(normal.sample(rng));
            }
        } else {
            z.extend(std::iter::repeat(0.0).take(self.n_normal));
        }
        z
    }

    /// Conditional mean of the stage-1 outcome.
    pub fn q1(&self, z: &[f64], a1: Arm) -> f64 {
        let mut v = self.main_effects[a1.index()];
        if a1 == Arm::Ebem {
            v += self.tailoring_coef * z[0];
        }
        for t in &self.extra_tailoring {
            if t.arm == a1 {
                v += t.coef * z[t.covariate];
            }
        }
        v + self.prognostic_part(z)
    }

    /// Conditional mean of the stage-2 (primary) outcome.
    pub fn q2(&self, z: &[f64], active: ArmSet) -> f64 {
        self.q2_treatment_part(z, active) + self.prognostic_part(z)
    }

    /// The stage-2 mean without covariate main effects. Prognostic terms are
    /// policy-independent, so dropping them here is what lets value ratios
    /// compare treatment rules on their own contribution.
    pub fn q2_treatment_part(&self, z: &[f64], active: ArmSet) -> f64 {
        let mut v = 0.0;
        for arm in active.iter() {
            v += self.main_effects[arm.index()];
        }
        if active.contains(Arm::Ebem) {
            v += self.tailoring_coef * z[0];
        }
        for t in &self.extra_tailoring {
            if active.contains(t.arm) {
                v += t.coef * z[t.covariate];
            }
        }
        for c in &self.combo_coefs {
            if active.contains(c.a) && active.contains(c.b) {
                v += c.coef;
            }
        }
        v
    }

    fn prognostic_part(&self, z: &[f64]) -> f64 {
        let mut v = self.prognostic_coefs.0 * z[1] + self.prognostic_coefs.1 * z[2];
        for p in &self.extra_prognostic {
            v += p.coef * z[p.covariate];
        }
        v
    }

    /// Quartiles of the stage-1 outcome marginal under uniform stage-1
    /// assignment, computed exactly from the normal-mixture representation.
    ///
    /// The stage-1 outcome is linear in the covariates, so conditional on the
    /// binary covariates and the arm it is normal; the marginal is a finite
    /// mixture and its quantiles follow by bisection on the mixture CDF.
    pub fn y1_quartiles(&self) -> Result<[f64; 3]> {
        let n_binary = self.n_binary();
        if n_binary > 16 {
            return Err(Error::Config(
                "stage-1 outcome quartiles need at most 16 binary covariates".into(),
            ));
        }
        let mut components: Vec<(f64, f64, f64)> = Vec::new(); // (weight, mean, sd)
        let n_combos = 1usize << n_binary;
        let normal_scale = self.normal_scale();
        for combo in 0..n_combos {
            let mut z = vec![0.0; self.n_covariates()];
            let mut weight = 1.0;
            for (l, &p) in self.bern_probs.iter().enumerate() {
                if combo & (1 << l) != 0 {
                    z[l] = 1.0;
                    weight *= p;
                } else {
                    z[l] = -1.0;
                    weight *= 1.0 - p;
                }
            }
            for a1 in Arm::ALL {
                let mean = self.q1(&z, a1);
                // Variance contributed by normal covariates through their
                // (arm-dependent) linear coefficients, plus outcome noise.
                let mut var = self.noise_sd * self.noise_sd;
                for j in n_binary..self.n_covariates() {
                    let mut probe = z.clone();
                    probe[j] = 1.0;
                    let coef = self.q1(&probe, a1) - mean;
                    var += coef * coef * normal_scale * normal_scale;
                }
                components.push((weight / N_ARMS as f64, mean, var.sqrt()));
            }
        }

        let cdf = |y: f64| -> f64 {
            components
                .iter()
                .map(|&(w, mean, sd)| {
                    if sd > 0.0 {
                        w * normal_cdf((y - mean) / sd)
                    } else if y >= mean {
                        w
                    } else {
                        0.0
                    }
                })
                .sum()
        };

        let lo = components
            .iter()
            .map(|&(_, m, s)| m - 12.0 * s.max(1e-9))
            .fold(f64::INFINITY, f64::min);
        let hi = components
            .iter()
            .map(|&(_, m, s)| m + 12.0 * s.max(1e-9))
            .fold(f64::NEG_INFINITY, f64::max);

        let mut quartiles = [0.0; 3];
        for (i, q) in [0.25, 0.5, 0.75].into_iter().enumerate() {
            let (mut a, mut b) = (lo, hi);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if cdf(mid) < q {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            quartiles[i] = 0.5 * (a + b);
        }
        Ok(quartiles)
    }

    /// Simulates a complete trial of `n_completers` records.
    pub fn simulate_trial<R: Rng + ?Sized>(
        &self,
        assignment: &AssignmentPolicy<'_>,
        rng: &mut R,
    ) -> Result<Vec<ParticipantRecord>> {
        self.validate()?;
        let quartiles = self.y1_quartiles()?;
        let mut minimization = match assignment {
            AssignmentPolicy::Minimization(config) => {
                config.validate()?;
                if config.n_arms() != N_ARMS {
                    return Err(Error::Config(
                        "stage-1 minimization needs the four study arms".into(),
                    ));
                }
                if config.n_factors() > self.n_binary() {
                    return Err(Error::Config(format!(
                        "minimization uses {} factors but only {} binary covariates exist",
                        config.n_factors(),
                        self.n_binary()
                    )));
                }
                Some(MinimizationState::new(N_ARMS, config.n_factors()))
            }
            _ => None,
        };

        let mut records = Vec::with_capacity(self.n_completers);
        for id in 0..self.n_completers {
            let z = self.draw_covariates(rng);
            let a1 = match assignment {
                AssignmentPolicy::UniformFeasible => Arm::ALL[rng.random_range(0..N_ARMS)],
                AssignmentPolicy::Minimization(config) => {
                    let factors: Vec<u8> = z[..config.n_factors()]
                        .iter()
                        .map(|v| u8::from(*v > 0.0))
                        .collect();
                    let state = minimization.as_mut().expect("state exists");
                    let outcome = assign(state, &factors, &[0, 1, 2, 3], config, rng)?;
                    Arm::ALL[outcome.assigned]
                }
                AssignmentPolicy::Explicit(policy) => policy.stage1(&z),
            };
            let y1 = self.q1(&z, a1) + self.noise(rng);
            let responder = responder_from_y1(y1, &quartiles);
            let actions = stage2_action_space(self.stage2_mode, a1, responder, None);
            let a2 = match assignment {
                AssignmentPolicy::Explicit(policy) => policy.stage2(&z, a1, &actions),
                _ => actions[rng.random_range(0..actions.len())],
            };
            let y2 = self.q2(&z, a2.active_set(a1)) + self.noise(rng);
            records.push(ParticipantRecord {
                id: id as u32,
                site: 0,
                covariates: z,
                excluded_arm: None,
                early_discontinuation: false,
                a1,
                y1,
                responder,
                a2,
                y2: Some(y2),
            });
        }
        Ok(records)
    }

    fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.noise_sd > 0.0 {
            Normal::new(0.0, self.noise_sd)
                .expect("valid noise sd")
                .sample(rng)
        } else {
            0.0
        }
    }
}

/// Standard normal CDF.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Maps a stage-1 outcome to a responder category by marginal quartiles:
/// the best quarter keeps, the worst quarter switches.
pub fn responder_from_y1(y1: f64, quartiles: &[f64; 3]) -> ResponderCategory {
    if y1 >= quartiles[2] {
        ResponderCategory::BestResponder
    } else if y1 >= quartiles[1] {
        ResponderCategory::ResponderHighPeg
    } else if y1 >= quartiles[0] {
        ResponderCategory::Intermediate
    } else {
        ResponderCategory::NonResponder
    }
}

/// Stage-1 assignment mechanism used by the simulator.
pub enum AssignmentPolicy<'a> {
    /// Uniform over the four arms.
    UniformFeasible,
    /// Covariate-adaptive minimization on the leading binary covariates.
    Minimization(MinimizationConfig),
    /// A fixed two-stage rule (both stages).
    Explicit(&'a dyn TreatmentPolicy),
}

/// Configuration for site-correlated binary factor generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiteCovariateConfig {
    pub n_sites: usize,
    /// Within-site intra-class correlation of each factor.
    pub icc: f64,
    pub marginal_p: f64,
    pub n_factors: usize,
}

impl Default for SiteCovariateConfig {
    fn default() -> Self {
        SiteCovariateConfig {
            n_sites: 8,
            icc: 0.05,
            marginal_p: 0.5,
            n_factors: 4,
        }
    }
}

impl SiteCovariateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 {
            return Err(Error::Config("need at least one site".into()));
        }
        if self.n_factors == 0 {
            return Err(Error::Config("need at least one factor".into()));
        }
        if !(self.icc >= 0.0 && self.icc < 1.0) {
            return Err(Error::Config(format!("icc {} outside [0, 1)", self.icc)));
        }
        if !(self.marginal_p > 0.0 && self.marginal_p < 1.0) {
            return Err(Error::Config(format!(
                "marginal_p {} outside (0, 1)",
                self.marginal_p
            )));
        }
        Ok(())
    }
}

/// Binary factors with site labels for `n` participants.
#[derive(Debug, Clone, PartialEq)]
pub struct SitePanel {
    pub sites: Vec<u16>,
    /// `factors[i]` is participant `i`'s zero-one factor vector.
    pub factors: Vec<Vec<u8>>,
}

/// Draws participants spread uniformly across sites, with each binary factor
/// sharing a site-level success probability.
///
/// Site probabilities are Beta with mean `marginal_p` and concentration
/// `(1 - icc) / icc`, which makes the within-site intra-class correlation of
/// each factor exactly `icc` while preserving the marginal probability.
pub fn draw_site_correlated_factors<R: Rng + ?Sized>(
    config: &SiteCovariateConfig,
    n: usize,
    rng: &mut R,
) -> Result<SitePanel> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("need at least one participant".into()));
    }
    let p = config.marginal_p;
    // site_p[s][f]
    let mut site_p = vec![vec![p; config.n_factors]; config.n_sites];
    if config.icc > 0.0 {
        let concentration = (1.0 - config.icc) / config.icc;
        let alpha = p * concentration;
        let beta = (1.0 - p) * concentration;
        let dist = Beta::new(alpha, beta).map_err(|e| {
            Error::Config(format!(
                "infeasible (icc, p) pair ({}, {}): {e}",
                config.icc, p
            ))
        })?;
        for site in site_p.iter_mut() {
            for slot in site.iter_mut() {
                *slot = dist.sample(rng);
            }
        }
    }
    let mut sites = Vec::with_capacity(n);
    let mut factors = Vec::with_capacity(n);
    for _ in 0..n {
        let site = rng.random_range(0..config.n_sites);
        let row: Vec<u8> = site_p[site]
            .iter()
            .map(|prob| u8::from(rng.random::<f64>() < *prob))
            .collect();
        sites.push(site as u16);
        factors.push(row);
    }
    Ok(SitePanel { sites, factors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::replicate_rng;
    use approx::assert_abs_diff_eq;

    fn z10(values: &[(usize, f64)]) -> Vec<f64> {
        let mut z = vec![0.0; 10];
        for &(i, v) in values {
            z[i] = v;
        }
        z
    }

    #[test]
    fn q1_matches_model_coefficients() {
        let dgm = DgmConfig::sparse();
        assert_abs_diff_eq!(dgm.q1(&z10(&[]), Arm::Esc), 0.1);
        assert_abs_diff_eq!(dgm.q1(&z10(&[(0, 1.0)]), Arm::Ebem), 0.7);
        assert_abs_diff_eq!(dgm.q1(&z10(&[(0, -1.0)]), Arm::Ebem), 0.1);
        // Prognostic contributions enter both stages identically.
        assert_abs_diff_eq!(dgm.q1(&z10(&[(1, 1.0), (2, -1.0)]), Arm::Esc), 0.6);
    }

    #[test]
    fn q2_matches_model_coefficients() {
        let dgm = DgmConfig::sparse();
        assert_abs_diff_eq!(dgm.q2(&z10(&[]), ArmSet::pair(Arm::Act, Arm::Ebem)), -0.35);
        assert_abs_diff_eq!(dgm.q2(&z10(&[]), ArmSet::single(Arm::Dul)), 0.3);
        // Symmetric prognostic values cancel.
        let z = z10(&[(1, 1.0), (2, 1.0)]);
        for arm in Arm::ALL {
            let active = ArmSet::single(arm);
            assert_abs_diff_eq!(dgm.q2(&z, active), dgm.q2_treatment_part(&z, active));
        }
    }

    #[test]
    fn q2_treatment_part_matches_hand_computed_table() {
        // Every reachable active set at z1 = +1 and z1 = -1, worked by hand
        // from the sparse coefficients.
        let dgm = DgmConfig::sparse();
        let cases: &[(ArmSet, f64, f64)] = &[
            (ArmSet::single(Arm::Esc), 0.1, 0.1),
            (ArmSet::single(Arm::Act), 0.25, 0.25),
            (ArmSet::single(Arm::Dul), 0.3, 0.3),
            (ArmSet::single(Arm::Ebem), 0.7, 0.1),
            (ArmSet::pair(Arm::Esc, Arm::Act), 0.35, 0.35),
            (ArmSet::pair(Arm::Esc, Arm::Dul), 0.4, 0.4),
            (ArmSet::pair(Arm::Esc, Arm::Ebem), 0.8, 0.2),
            (ArmSet::pair(Arm::Act, Arm::Dul), 0.45, 0.45),
            (ArmSet::pair(Arm::Act, Arm::Ebem), -0.05, -0.65),
            (ArmSet::pair(Arm::Dul, Arm::Ebem), 0.9, 0.3),
        ];
        for &(active, plus, minus) in cases {
            assert_abs_diff_eq!(
                dgm.q2_treatment_part(&z10(&[(0, 1.0)]), active),
                plus,
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(
                dgm.q2_treatment_part(&z10(&[(0, -1.0)]), active),
                minus,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn optimal_stage2_action_differs_by_tailoring_covariate() {
        let dgm = DgmConfig::sparse();
        let best = |z1: f64| {
            let z = z10(&[(0, z1)]);
            let mut sets: Vec<ArmSet> = Arm::ALL.map(ArmSet::single).to_vec();
            for a in Arm::ALL {
                for b in Arm::ALL {
                    if a < b {
                        sets.push(ArmSet::pair(a, b));
                    }
                }
            }
            sets.into_iter()
                .max_by(|x, y| {
                    dgm.q2_treatment_part(&z, *x)
                        .total_cmp(&dgm.q2_treatment_part(&z, *y))
                })
                .unwrap()
        };
        assert_eq!(best(1.0), ArmSet::pair(Arm::Dul, Arm::Ebem));
        assert_eq!(best(-1.0), ArmSet::pair(Arm::Act, Arm::Dul));
    }

    #[test]
    fn average_treatment_effect_is_main_effect_under_centered_covariates() {
        // Enumerate the binary covariate distribution with all p = 0.5;
        // interactions average out exactly.
        let mut dgm = DgmConfig::sparse();
        dgm.bern_probs = vec![0.5; 5];
        for a1 in Arm::ALL {
            let mut mean = 0.0;
            for combo in 0..(1 << 5) {
                let mut z = vec![0.0; 10];
                let mut w = 1.0;
                for l in 0..5 {
                    z[l] = if combo & (1 << l) != 0 { 1.0 } else { -1.0 };
                    w *= 0.5;
                }
                mean += w * dgm.q1(&z, a1);
            }
            assert_abs_diff_eq!(mean, dgm.main_effects[a1.index()], epsilon = 1e-12);
        }
    }

    #[test]
    fn covariate_draws_have_expected_moments() {
        let dgm = DgmConfig::sparse();
        let mut rng = replicate_rng(11, 0, 0);
        let n = 1_000_000usize;
        let mut sum_z1 = 0.0;
        let mut sum_z6 = 0.0;
        let mut sum_z6_sq = 0.0;
        for _ in 0..n {
            let z = dgm.draw_covariates(&mut rng);
            for l in 0..5 {
                assert!(z[l] == 1.0 || z[l] == -1.0);
            }
            sum_z1 += z[0];
            sum_z6 += z[5];
            sum_z6_sq += z[5] * z[5];
        }
        let mean_z1 = sum_z1 / n as f64;
        let expected = 2.0 * dgm.bern_probs[0] - 1.0;
        let se = (1.0 - expected * expected).max(1e-12).sqrt() / (n as f64).sqrt();
        assert!((mean_z1 - expected).abs() < 3.0 * se, "mean {mean_z1}");

        let mean_z6 = sum_z6 / n as f64;
        let var_z6 = sum_z6_sq / n as f64 - mean_z6 * mean_z6;
        let target = dgm.normal_sd * dgm.normal_sd;
        assert!(
            (var_z6 - target).abs() / target < 0.01,
            "variance {var_z6} vs {target}"
        );
    }

    #[test]
    fn normal_variance_override() {
        let mut dgm = DgmConfig::sparse();
        dgm.normal_variance = Some(0.25);
        assert_abs_diff_eq!(dgm.normal_scale(), 0.5);
    }

    #[test]
    fn simulated_trial_has_exact_record_count_and_valid_records() {
        let mut dgm = DgmConfig::sparse();
        dgm.n_completers = 500;
        let mut rng = replicate_rng(3, 1, 0);
        let records = dgm
            .simulate_trial(&AssignmentPolicy::UniformFeasible, &mut rng)
            .unwrap();
        assert_eq!(records.len(), 500);
        for rec in &records {
            rec.validate().unwrap();
            assert!(rec.y2.is_some());
        }
    }

    #[test]
    fn responder_driven_mode_respects_feasibility() {
        let mut dgm = DgmConfig::sparse();
        dgm.n_completers = 2000;
        dgm.stage2_mode = Stage2Mode::ResponderDriven;
        let mut rng = replicate_rng(3, 2, 0);
        let records = dgm
            .simulate_trial(&AssignmentPolicy::UniformFeasible, &mut rng)
            .unwrap();
        for rec in &records {
            let feasible = feasible_stage2(rec.a1, rec.responder, rec.excluded_arm);
            assert!(feasible.contains(&rec.a2), "{rec:?}");
        }
        // All four categories occur under quartile mapping.
        for cat in ResponderCategory::ALL {
            assert!(records.iter().any(|r| r.responder == cat), "{cat:?} missing");
        }
    }

    #[test]
    fn noiseless_fixed_policy_yields_constant_outcome() {
        struct AlwaysEbemKeep;
        impl TreatmentPolicy for AlwaysEbemKeep {
            fn stage1(&self, _z: &[f64]) -> Arm {
                Arm::Ebem
            }
            fn stage2(
                &self,
                _z: &[f64],
                _a1: Arm,
                _feasible: &[Stage2Action],
            ) -> Stage2Action {
                Stage2Action::Keep
            }
        }
        let mut dgm = DgmConfig::sparse();
        dgm.n_completers = 50;
        dgm.noise_sd = 0.0;
        dgm.tailoring_coef = 0.0;
        dgm.prognostic_coefs = (0.0, 0.0);
        let mut rng = replicate_rng(5, 3, 0);
        let records = dgm
            .simulate_trial(&AssignmentPolicy::Explicit(&AlwaysEbemKeep), &mut rng)
            .unwrap();
        for rec in records {
            assert_eq!(rec.a1, Arm::Ebem);
            assert_abs_diff_eq!(rec.y2.unwrap(), 0.4, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_stage1_outcome_matches_analytic_value_under_centered_covariates() {
        let mut dgm = DgmConfig::sparse();
        dgm.bern_probs = vec![0.5; 5];
        dgm.n_completers = 200_000;
        let mut rng = replicate_rng(7, 4, 0);
        let records = dgm
            .simulate_trial(&AssignmentPolicy::UniformFeasible, &mut rng)
            .unwrap();
        let mean: f64 =
            records.iter().map(|r| r.y1).sum::<f64>() / records.len() as f64;
        // E[y1] = mean of the four main effects; outcome sd ~ sqrt(1 + extras).
        let expected = 0.2625;
        let se = 1.1 / (records.len() as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn y1_quartiles_match_empirical_quantiles() {
        let dgm = DgmConfig::sparse();
        let quartiles = dgm.y1_quartiles().unwrap();
        assert!(quartiles[0] < quartiles[1] && quartiles[1] < quartiles[2]);
        let mut rng = replicate_rng(9, 5, 0);
        let n = 400_000usize;
        let mut below = [0usize; 3];
        for _ in 0..n {
            let z = dgm.draw_covariates(&mut rng);
            let a1 = Arm::ALL[rng.random_range(0..4)];
            let y1 = dgm.q1(&z, a1)
                + dgm.noise_sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
            for (slot, q) in below.iter_mut().zip(quartiles) {
                if y1 < q {
                    *slot += 1;
                }
            }
        }
        for (i, target) in [0.25, 0.5, 0.75].into_iter().enumerate() {
            let frac = below[i] as f64 / n as f64;
            let se = (target * (1.0 - target) / n as f64).sqrt();
            assert!(
                (frac - target).abs() < 4.0 * se,
                "quartile {i}: {frac} vs {target}"
            );
        }
    }

    #[test]
    fn site_factors_marginal_and_icc() {
        // Calibration check for the generator itself: many sites, so the
        // between-site variance component is estimated precisely.
        let config = SiteCovariateConfig {
            n_sites: 200,
            ..SiteCovariateConfig::default()
        };
        let mut rng = replicate_rng(13, 6, 0);
        let n = 100_000usize;
        let panel = draw_site_correlated_factors(&config, n, &mut rng).unwrap();

        // Marginal frequency ~ 0.5, with a cluster-robust standard error
        // (site effects dominate the binomial noise at this size).
        let ones: usize = panel.factors.iter().map(|f| usize::from(f[0])).sum();
        let p_hat = ones as f64 / n as f64;
        let mut site_sum = vec![0.0; config.n_sites];
        let mut site_n = vec![0.0; config.n_sites];
        for (site, f) in panel.sites.iter().zip(&panel.factors) {
            site_sum[*site as usize] += f64::from(f[0]);
            site_n[*site as usize] += 1.0;
        }
        let site_means: Vec<f64> = site_sum
            .iter()
            .zip(&site_n)
            .map(|(s, c)| s / c)
            .collect();
        let mean_of_means = site_means.iter().sum::<f64>() / config.n_sites as f64;
        let between_var = site_means
            .iter()
            .map(|m| (m - mean_of_means) * (m - mean_of_means))
            .sum::<f64>()
            / (config.n_sites as f64 - 1.0);
        let se = (between_var / config.n_sites as f64).sqrt();
        assert!((p_hat - 0.5).abs() < 4.0 * se, "marginal {p_hat} (se {se})");

        // One-way ANOVA estimator of the intra-class correlation.
        let icc_hat = anova_icc(&panel, 0, config.n_sites);
        assert!(
            (icc_hat - config.icc).abs() < 0.01,
            "icc estimate {icc_hat} vs {}",
            config.icc
        );
    }

    #[test]
    fn zero_icc_factors_are_independent_of_site() {
        let config = SiteCovariateConfig {
            icc: 0.0,
            ..SiteCovariateConfig::default()
        };
        let mut rng = replicate_rng(13, 7, 0);
        let n = 100_000usize;
        let panel = draw_site_correlated_factors(&config, n, &mut rng).unwrap();
        // Chi-square independence test on the site-by-factor table.
        let mut table = vec![[0f64; 2]; config.n_sites];
        for (site, f) in panel.sites.iter().zip(&panel.factors) {
            table[*site as usize][f[0] as usize] += 1.0;
        }
        let col: [f64; 2] = [
            table.iter().map(|r| r[0]).sum::<f64>(),
            table.iter().map(|r| r[1]).sum::<f64>(),
        ];
        let total = col[0] + col[1];
        let mut chi2 = 0.0;
        for row in &table {
            let row_total = row[0] + row[1];
            for j in 0..2 {
                let expected = row_total * col[j] / total;
                let d = row[j] - expected;
                chi2 += d * d / expected;
            }
        }
        // df = 7, alpha = 0.001.
        use statrs::distribution::ContinuousCDF;
        let critical = statrs::distribution::ChiSquared::new(7.0)
            .unwrap()
            .inverse_cdf(0.999);
        assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
    }

    #[test]
    fn infeasible_site_config_rejected() {
        let bad = SiteCovariateConfig {
            icc: 1.0,
            ..SiteCovariateConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_p = SiteCovariateConfig {
            marginal_p: 0.0,
            ..SiteCovariateConfig::default()
        };
        assert!(bad_p.validate().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DgmConfig::sparse().validate().is_ok());
        assert!(DgmConfig::dense().validate().is_ok());
        let mut bad = DgmConfig::sparse();
        bad.bern_probs = vec![0.4];
        assert!(bad.validate().is_err());
        let mut bad = DgmConfig::sparse();
        bad.noise_sd = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = DgmConfig::sparse();
        bad.extra_tailoring.push(TailoringTerm {
            covariate: 99,
            arm: Arm::Act,
            coef: 0.1,
        });
        assert!(bad.validate().is_err());
    }

    fn anova_icc(panel: &SitePanel, factor: usize, n_sites: usize) -> f64 {
        let mut site_sum = vec![0.0; n_sites];
        let mut site_n = vec![0.0; n_sites];
        let mut grand_sum = 0.0;
        let n = panel.sites.len() as f64;
        for (site, f) in panel.sites.iter().zip(&panel.factors) {
            let y = f64::from(f[factor]);
            site_sum[*site as usize] += y;
            site_n[*site as usize] += 1.0;
            grand_sum += y;
        }
        let grand_mean = grand_sum / n;
        let s = n_sites as f64;
        let mut ssb = 0.0;
        for i in 0..n_sites {
            let mean = site_sum[i] / site_n[i];
            ssb += site_n[i] * (mean - grand_mean) * (mean - grand_mean);
        }
        let mut ssw = 0.0;
        for (site, f) in panel.sites.iter().zip(&panel.factors) {
            let mean = site_sum[*site as usize] / site_n[*site as usize];
            let d = f64::from(f[factor]) - mean;
            ssw += d * d;
        }
        let msb = ssb / (s - 1.0);
        let msw = ssw / (n - s);
        let n0 = (n - site_n.iter().map(|c| c * c).sum::<f64>() / n) / (s - 1.0);
        (msb - msw) / (msb + (n0 - 1.0) * msw)
    }
}
