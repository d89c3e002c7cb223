//! Treatment-regime estimation by backward induction.
//!
//! Stage 2 regresses the primary outcome on the stage-2 design with an
//! L1 penalty; the pseudo-outcome for each record is the fitted model's
//! maximum over the record's stage-2 action space; stage 1 regresses the
//! pseudo-outcome on the stage-1 design. The two fitted models induce an
//! argmax policy. Policy values are Monte Carlo expectations of the
//! noiseless stage-2 treatment mean with covariate main effects removed, so
//! the ratio to the optimal regime's value compares treatment rules alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    normal_cdf, responder_from_y1, stage2_action_space, DgmConfig, Stage2Mode,
};
use crate::design::DesignSpec;
use crate::error::{Error, Result};
use crate::lasso::{lasso_fit_factors, lasso_fit_with, select_lambda_factors, CvConfig, FitControl};
use crate::model::{Arm, ParticipantRecord, Stage2Action, TreatmentPolicy};

/// A fitted stage model: intercept plus coefficients aligned to the design
/// columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QModel {
    /// 1 or 2.
    pub stage: u8,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub column_names: Vec<String>,
}

impl QModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        debug_assert_eq!(row.len(), self.coefficients.len());
        self.intercept
            + row
                .iter()
                .zip(&self.coefficients)
                .map(|(x, b)| x * b)
                .sum::<f64>()
    }

    pub fn n_nonzero(&self) -> usize {
        self.coefficients.iter().filter(|b| **b != 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients.len() != self.column_names.len() {
            return Err(Error::Dimension {
                context: "model coefficients vs column names",
                expected: self.column_names.len(),
                actual: self.coefficients.len(),
            });
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("model lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

/// How the penalty is chosen per stage.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaRule {
    /// K-fold cross-validation over a geometric path.
    CrossValidated(CvConfig),
    /// A fixed penalty for both stages.
    Fixed(f64),
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::CrossValidated(CvConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLearnOptions {
    pub mode: Stage2Mode,
    pub lambda_rule: LambdaRule,
    /// Shield the action-encoding columns (arm indicators and active-set
    /// pair products) from the penalty. The argmax ranks actions by these
    /// coefficients, so shrinking them distorts decisions; the penalty's job
    /// is the covariate terms.
    pub shield_treatment_terms: bool,
    /// Relaxed fit: after selection, refit the chosen columns without
    /// penalty so surviving coefficients are unbiased.
    pub relax: bool,
    pub control: FitControl,
}

impl Default for QLearnOptions {
    fn default() -> Self {
        QLearnOptions {
            mode: Stage2Mode::Unrestricted,
            lambda_rule: LambdaRule::default(),
            shield_treatment_terms: true,
            relax: false,
            control: FitControl {
                tol: 1e-6,
                max_sweeps: 50_000,
            },
        }
    }
}

/// Two fitted stage models with argmax semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPolicy {
    pub stage1: QModel,
    pub stage2: QModel,
    pub design: DesignSpec,
    pub mode: Stage2Mode,
}

impl FittedPolicy {
    fn stage1_action(&self, z: &[f64]) -> Arm {
        let mut row = vec![0.0; self.design.stage1_width()];
        let mut best = Arm::Esc;
        let mut best_value = f64::NEG_INFINITY;
        for arm in Arm::ALL {
            self.design.fill_stage1_row(z, arm, &mut row);
            let value = self.stage1.predict_row(&row);
            // Strict comparison keeps the lowest action index on ties.
            if value > best_value {
                best_value = value;
                best = arm;
            }
        }
        best
    }

    fn stage2_action(&self, z: &[f64], a1: Arm, feasible: &[Stage2Action]) -> Stage2Action {
        debug_assert!(!feasible.is_empty());
        let mut row = vec![0.0; self.design.stage2_width()];
        let mut best = feasible[0];
        let mut best_value = f64::NEG_INFINITY;
        for &action in feasible {
            self.design.fill_stage2_row(z, action.active_set(a1), &mut row);
            let value = self.stage2.predict_row(&row);
            if value > best_value {
                best_value = value;
                best = action;
            }
        }
        best
    }
}

/// The true-model argmax policy, for oracles and value denominators.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    dgm: DgmConfig,
    quartiles: [f64; 3],
}

impl OraclePolicy {
    pub fn new(dgm: &DgmConfig) -> Result<OraclePolicy> {
        dgm.validate()?;
        Ok(OraclePolicy {
            quartiles: dgm.y1_quartiles()?,
            dgm: dgm.clone(),
        })
    }

    fn best_stage2_value(&self, z: &[f64], a1: Arm, actions: &[Stage2Action]) -> f64 {
        actions
            .iter()
            .map(|a| self.dgm.q2_treatment_part(z, a.active_set(a1)))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Expected best stage-2 treatment value from starting arm `a1`,
    /// averaging over the interim-response category when the mode routes by
    /// responder status.
    fn continuation_value(&self, z: &[f64], a1: Arm) -> f64 {
        match self.dgm.stage2_mode {
            Stage2Mode::Unrestricted => {
                let actions = stage2_action_space(Stage2Mode::Unrestricted, a1, crate::model::ResponderCategory::BestResponder, None);
                self.best_stage2_value(z, a1, &actions)
            }
            Stage2Mode::ResponderDriven => {
                let mean = self.dgm.q1(z, a1);
                let sd = self.dgm.noise_sd;
                let mut value = 0.0;
                let mut prev_cdf = 0.0;
                // Categories from worst (below q25) to best (at or above q75).
                let categories = [
                    crate::model::ResponderCategory::NonResponder,
                    crate::model::ResponderCategory::Intermediate,
                    crate::model::ResponderCategory::ResponderHighPeg,
                    crate::model::ResponderCategory::BestResponder,
                ];
                for (i, cat) in categories.into_iter().enumerate() {
                    let upper_cdf = if i < 3 {
                        let t = self.quartiles[i];
                        if sd > 0.0 {
                            normal_cdf((t - mean) / sd)
                        } else if mean < t {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        1.0
                    };
                    let prob = (upper_cdf - prev_cdf).max(0.0);
                    prev_cdf = upper_cdf;
                    if prob > 0.0 {
                        let actions =
                            stage2_action_space(Stage2Mode::ResponderDriven, a1, cat, None);
                        value += prob * self.best_stage2_value(z, a1, &actions);
                    }
                }
                value
            }
        }
    }
}

impl TreatmentPolicy for OraclePolicy {
    fn stage1(&self, z: &[f64]) -> Arm {
        let mut best = Arm::Esc;
        let mut best_value = f64::NEG_INFINITY;
        for arm in Arm::ALL {
            let value = self.continuation_value(z, arm);
            if value > best_value {
                best_value = value;
                best = arm;
            }
        }
        best
    }

    fn stage2(&self, z: &[f64], a1: Arm, feasible: &[Stage2Action]) -> Stage2Action {
        debug_assert!(!feasible.is_empty());
        let mut best = feasible[0];
        let mut best_value = f64::NEG_INFINITY;
        for &action in feasible {
            let value = self.dgm.q2_treatment_part(z, action.active_set(a1));
            if value > best_value {
                best_value = value;
                best = action;
            }
        }
        best
    }
}

/// A treatment rule: fitted, oracle, or fixed.
#[derive(Debug, Clone)]
pub enum Policy {
    Fitted(FittedPolicy),
    Oracle(OraclePolicy),
    /// The same two actions for everyone (falls back to the first feasible
    /// action when its own is infeasible).
    Fixed { a1: Arm, a2: Stage2Action },
}

impl TreatmentPolicy for Policy {
    fn stage1(&self, z: &[f64]) -> Arm {
        match self {
            Policy::Fitted(p) => p.stage1_action(z),
            Policy::Oracle(p) => p.stage1(z),
            Policy::Fixed { a1, .. } => *a1,
        }
    }

    fn stage2(&self, z: &[f64], a1: Arm, feasible: &[Stage2Action]) -> Stage2Action {
        match self {
            Policy::Fitted(p) => p.stage2_action(z, a1, feasible),
            Policy::Oracle(p) => p.stage2(z, a1, feasible),
            Policy::Fixed { a2, .. } => {
                if feasible.contains(a2) {
                    *a2
                } else {
                    feasible[0]
                }
            }
        }
    }
}

/// Result of one backward-induction fit.
#[derive(Debug, Clone)]
pub struct QLearnFit {
    pub stage2: QModel,
    pub stage1: QModel,
    pub policy: Policy,
}

/// Fits both stage models by backward induction and returns the induced
/// policy.
///
/// All records must be completers. The stage-2 argmax ranges over each
/// record's action space under `options.mode`; ties break to the lowest
/// action index in the canonical ordering.
pub fn q_learn<R: Rng + ?Sized>(
    records: &[ParticipantRecord],
    design: &DesignSpec,
    options: &QLearnOptions,
    rng: &mut R,
) -> Result<QLearnFit> {
    if records.is_empty() {
        return Err(Error::Empty("participant records"));
    }
    let y2: Vec<f64> = records
        .iter()
        .map(|r| {
            r.y2.ok_or_else(|| {
                Error::Data(format!("participant {} is missing the primary outcome", r.id))
            })
        })
        .collect::<Result<_>>()?;

    let x2 = design.stage2_matrix(records)?;
    let y2 = ndarray::Array1::from_vec(y2);
    let factors2 = options
        .shield_treatment_terms
        .then(|| design.stage2_penalty_factors());
    let stage2 = fit_stage(
        x2.view(),
        y2.view(),
        2,
        design.stage2_names(),
        factors2.as_deref(),
        options,
        rng,
    )?;

    let pseudo = pseudo_outcomes(records, &stage2, design, options.mode)?;

    let x1 = design.stage1_matrix(records)?;
    let pseudo = ndarray::Array1::from_vec(pseudo);
    let factors1 = options
        .shield_treatment_terms
        .then(|| design.stage1_penalty_factors());
    let stage1 = fit_stage(
        x1.view(),
        pseudo.view(),
        1,
        design.stage1_names(),
        factors1.as_deref(),
        options,
        rng,
    )?;

    let policy = Policy::Fitted(FittedPolicy {
        stage1: stage1.clone(),
        stage2: stage2.clone(),
        design: design.clone(),
        mode: options.mode,
    });
    Ok(QLearnFit { stage2, stage1, policy })
}

fn fit_stage<R: Rng + ?Sized>(
    x: ndarray::ArrayView2<'_, f64>,
    y: ndarray::ArrayView1<'_, f64>,
    stage: u8,
    column_names: Vec<String>,
    factors: Option<&[f64]>,
    options: &QLearnOptions,
    rng: &mut R,
) -> Result<QModel> {
    let lambda = match &options.lambda_rule {
        LambdaRule::Fixed(l) => *l,
        LambdaRule::CrossValidated(cv) => select_lambda_factors(x, y, factors, cv, rng)?,
    };
    let fit = lasso_fit_factors(x, y, lambda, factors, &options.control)?;
    let mut intercept = fit.intercept;
    let mut coefficients = fit.coefficients;
    if options.relax {
        let support: Vec<usize> = coefficients
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect();
        if !support.is_empty() {
            let mut sub = ndarray::Array2::zeros((x.nrows(), support.len()));
            for (c, &j) in support.iter().enumerate() {
                sub.column_mut(c).assign(&x.column(j));
            }
            let refit = lasso_fit_with(sub.view(), y, 0.0, &options.control)?;
            intercept = refit.intercept;
            coefficients = vec![0.0; coefficients.len()];
            for (c, &j) in support.iter().enumerate() {
                coefficients[j] = refit.coefficients[c];
            }
        }
    }
    Ok(QModel {
        stage,
        intercept,
        coefficients,
        lambda,
        column_names,
    })
}

/// Per-record maxima of the fitted stage-2 model over the record's stage-2
/// action space: the response for the stage-1 regression.
pub fn pseudo_outcomes(
    records: &[ParticipantRecord],
    stage2: &QModel,
    design: &DesignSpec,
    mode: Stage2Mode,
) -> Result<Vec<f64>> {
    stage2.validate()?;
    let mut row = vec![0.0; design.stage2_width()];
    records
        .iter()
        .map(|rec| {
            let actions =
                stage2_action_space(mode, rec.a1, rec.effective_responder(), rec.excluded_arm);
            let mut best = f64::NEG_INFINITY;
            for action in &actions {
                design.fill_stage2_row(&rec.covariates, action.active_set(rec.a1), &mut row);
                best = best.max(stage2.predict_row(&row));
            }
            if actions.contains(&rec.a2) {
                design.fill_stage2_row(&rec.covariates, rec.a2.active_set(rec.a1), &mut row);
                debug_assert!(
                    best >= stage2.predict_row(&row),
                    "pseudo-outcome below the observed action's prediction"
                );
            }
            Ok(best)
        })
        .collect()
}

/// A Monte Carlo value estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub mc_se: f64,
    pub n: usize,
}

/// Monte Carlo value of a policy: the expected noiseless stage-2 treatment
/// mean under the policy's decisions, covariate main effects removed.
///
/// Under responder-driven routing the interim outcome (with its noise) is
/// drawn to determine the feasible stage-2 set; the stage-2 outcome itself is
/// evaluated noiselessly, which is unbiased and lower variance.
pub fn policy_value<P: TreatmentPolicy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    dgm: &DgmConfig,
    n_mc: usize,
    rng: &mut R,
) -> Result<ValueEstimate> {
    if n_mc == 0 {
        return Err(Error::Config("policy value needs at least one draw".into()));
    }
    dgm.validate()?;
    let quartiles = match dgm.stage2_mode {
        Stage2Mode::ResponderDriven => Some(dgm.y1_quartiles()?),
        Stage2Mode::Unrestricted => None,
    };
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_mc {
        let z = dgm.draw_covariates(rng);
        let a1 = policy.stage1(&z);
        let responder = match &quartiles {
            Some(q) => {
                let noise = if dgm.noise_sd > 0.0 {
                    use rand_distr::Distribution;
                    let draw: f64 = rand_distr::StandardNormal.sample(rng);
                    dgm.noise_sd * draw
                } else {
                    0.0
                };
                responder_from_y1(dgm.q1(&z, a1) + noise, q)
            }
            None => crate::model::ResponderCategory::BestResponder,
        };
        let actions = stage2_action_space(dgm.stage2_mode, a1, responder, None);
        let a2 = policy.stage2(&z, a1, &actions);
        debug_assert!(actions.contains(&a2), "policy chose an infeasible action");
        let v = dgm.q2_treatment_part(&z, a2.active_set(a1));
        sum += v;
        sum_sq += v * v;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok(ValueEstimate {
        mean,
        mc_se: (var / n).sqrt(),
        n: n_mc,
    })
}

/// Exact value of the optimal regime by enumeration over the binary
/// covariates.
///
/// Requires every covariate entering the treatment part of the outcome
/// models (and, under responder-driven routing, the interim outcome mean) to
/// be binary; the default scenarios satisfy this. Normal covariates may still
/// be prognostic under unrestricted routing since prognostic terms cancel
/// from the treatment part.
pub fn optimal_value(dgm: &DgmConfig) -> Result<f64> {
    dgm.validate()?;
    let n_binary = dgm.n_binary();
    let enumerable_tailoring = dgm
        .extra_tailoring
        .iter()
        .all(|t| t.coef == 0.0 || t.covariate < n_binary);
    if !enumerable_tailoring {
        return Err(Error::Config(
            "optimal value enumeration needs binary tailoring covariates; \
             evaluate the oracle policy by Monte Carlo instead"
                .into(),
        ));
    }
    if dgm.stage2_mode == Stage2Mode::ResponderDriven {
        let prognostic_binary = dgm
            .extra_prognostic
            .iter()
            .all(|p| p.coef == 0.0 || p.covariate < n_binary)
            && (n_binary > 1 || dgm.prognostic_coefs.0 == 0.0)
            && (n_binary > 2 || dgm.prognostic_coefs.1 == 0.0);
        if !prognostic_binary {
            return Err(Error::Config(
                "optimal value enumeration under responder-driven routing needs \
                 binary prognostic covariates; evaluate the oracle policy by \
                 Monte Carlo instead"
                    .into(),
            ));
        }
    }
    if n_binary > 16 {
        return Err(Error::Config("too many binary covariates to enumerate".into()));
    }

    let oracle = OraclePolicy::new(dgm)?;
    let mut value = 0.0;
    for combo in 0..(1usize << n_binary) {
        let mut z = vec![0.0; dgm.n_covariates()];
        let mut weight = 1.0;
        for (l, &p) in dgm.bern_probs.iter().enumerate() {
            if combo & (1 << l) != 0 {
                z[l] = 1.0;
                weight *= p;
            } else {
                z[l] = -1.0;
                weight *= 1.0 - p;
            }
        }
        let best = Arm::ALL
            .into_iter()
            .map(|a1| oracle.continuation_value(&z, a1))
            .fold(f64::NEG_INFINITY, f64::max);
        value += weight * best;
    }
    Ok(value)
}

/// A value ratio against the optimal regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    /// `max(v_hat, 0) / v_star`.
    pub ratio: f64,
    pub v_hat: f64,
    pub v_hat_se: f64,
    pub v_star: f64,
}

/// Estimates `V(policy) / V(optimal)`, truncating the numerator below at
/// zero. Errors when the optimal value is not strictly positive.
pub fn value_ratio<P: TreatmentPolicy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    dgm: &DgmConfig,
    n_mc: usize,
    rng: &mut R,
) -> Result<RatioEstimate> {
    let v_star = optimal_value(dgm)?;
    if !(v_star > 0.0) {
        return Err(Error::Config(format!(
            "optimal regime value {v_star} is not strictly positive; \
             the value ratio is undefined for this model"
        )));
    }
    let estimate = policy_value(policy, dgm, n_mc, rng)?;
    Ok(RatioEstimate {
        ratio: estimate.mean.max(0.0) / v_star,
        v_hat: estimate.mean,
        v_hat_se: estimate.mc_se,
        v_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::AssignmentPolicy;
    use crate::model::{unrestricted_stage2, ResponderCategory};
    use crate::runner::replicate_rng;
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;

    #[test]
    fn optimal_value_of_default_sparse_model() {
        // Hand enumeration: best reachable active set is {dul, ebem} worth
        // 0.9 when the tailoring covariate is +1 and {act, dul} worth 0.45
        // when it is -1; the covariate is symmetric.
        let dgm = DgmConfig::sparse();
        let v = optimal_value(&dgm).unwrap();
        assert_abs_diff_eq!(v, 0.675, epsilon = 1e-9);
    }

    #[test]
    fn optimal_value_agrees_with_monte_carlo_oracle() {
        let dgm = DgmConfig::sparse();
        let exact = optimal_value(&dgm).unwrap();
        let oracle = OraclePolicy::new(&dgm).unwrap();
        let mut rng = replicate_rng(55, 20, 0);
        let est = policy_value(&oracle, &dgm, 200_000, &mut rng).unwrap();
        assert!(
            (est.mean - exact).abs() < 3.0 * est.mc_se,
            "MC {} vs exact {exact} (se {})",
            est.mean,
            est.mc_se
        );
    }

    #[test]
    fn optimal_value_responder_driven_agrees_with_monte_carlo() {
        let mut dgm = DgmConfig::sparse();
        dgm.stage2_mode = Stage2Mode::ResponderDriven;
        let exact = optimal_value(&dgm).unwrap();
        assert!(exact > 0.0);
        let oracle = OraclePolicy::new(&dgm).unwrap();
        let mut rng = replicate_rng(55, 21, 0);
        let est = policy_value(&oracle, &dgm, 200_000, &mut rng).unwrap();
        assert!(
            (est.mean - exact).abs() < 3.5 * est.mc_se,
            "MC {} vs exact {exact} (se {})",
            est.mean,
            est.mc_se
        );
    }

    #[test]
    fn fixed_policy_values() {
        let dgm = DgmConfig::sparse();
        let mut rng = replicate_rng(55, 22, 0);
        let keep_dul = Policy::Fixed {
            a1: Arm::Dul,
            a2: Stage2Action::Keep,
        };
        let est = policy_value(&keep_dul, &dgm, 5_000, &mut rng).unwrap();
        assert_abs_diff_eq!(est.mean, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(est.mc_se, 0.0, epsilon = 1e-8);

        // The worst fixed pair has negative value; the ratio truncates to 0.
        let worst = Policy::Fixed {
            a1: Arm::Act,
            a2: Stage2Action::Augment(Arm::Ebem),
        };
        let ratio = value_ratio(&worst, &dgm, 20_000, &mut rng).unwrap();
        assert!(ratio.v_hat < -0.3, "v_hat {}", ratio.v_hat);
        assert_eq!(ratio.ratio, 0.0);
    }

    #[test]
    fn self_ratio_is_one() {
        let dgm = DgmConfig::sparse();
        let oracle = Policy::Oracle(OraclePolicy::new(&dgm).unwrap());
        let mut rng = replicate_rng(55, 23, 0);
        let ratio = value_ratio(&oracle, &dgm, 100_000, &mut rng).unwrap();
        assert!(
            (ratio.ratio - 1.0).abs() < 3.0 * ratio.v_hat_se / ratio.v_star,
            "ratio {}",
            ratio.ratio
        );
    }

    #[test]
    fn identical_policies_same_seed_same_value() {
        let dgm = DgmConfig::sparse();
        let policy = Policy::Fixed {
            a1: Arm::Ebem,
            a2: Stage2Action::Augment(Arm::Dul),
        };
        let a = policy_value(&policy, &dgm, 10_000, &mut replicate_rng(9, 24, 5)).unwrap();
        let b = policy_value(&policy, &dgm, 10_000, &mut replicate_rng(9, 24, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn null_model_has_no_positive_optimal_value() {
        let mut dgm = DgmConfig::sparse();
        dgm.main_effects = [0.0; 4];
        dgm.tailoring_coef = 0.0;
        dgm.combo_coefs.clear();
        let v = optimal_value(&dgm).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        let policy = Policy::Fixed {
            a1: Arm::Esc,
            a2: Stage2Action::Keep,
        };
        let mut rng = replicate_rng(55, 25, 0);
        assert!(value_ratio(&policy, &dgm, 100, &mut rng).is_err());
    }

    /// Backward-induction consistency on noiseless data: unpenalized fits on
    /// designs spanning the true functional form recover the generating
    /// coefficients in an identifiable parametrization.
    #[test]
    fn noiseless_exact_form_recovers_generating_coefficients() {
        let mut dgm = DgmConfig::sparse();
        dgm.noise_sd = 0.0;
        dgm.n_completers = 10_000;
        let mut rng = replicate_rng(55, 26, 0);
        let records = dgm
            .simulate_trial(&AssignmentPolicy::UniformFeasible, &mut rng)
            .unwrap();

        // Stage 2: the exact generating terms. The active-set indicator sum
        // varies (one or two treatments), so all four indicators can sit next
        // to the unpenalized intercept without collinearity.
        let n = records.len();
        let mut x2 = ndarray::Array2::zeros((n, 10));
        let mut y2 = Array1::zeros(n);
        for (i, rec) in records.iter().enumerate() {
            let active = rec.a2.active_set(rec.a1);
            let z = &rec.covariates;
            for arm in Arm::ALL {
                x2[(i, arm.index())] = f64::from(u8::from(active.contains(arm)));
            }
            x2[(i, 4)] = z[0] * f64::from(u8::from(active.contains(Arm::Ebem)));
            x2[(i, 5)] =
                f64::from(u8::from(active.contains(Arm::Act) && active.contains(Arm::Dul)));
            x2[(i, 6)] =
                f64::from(u8::from(active.contains(Arm::Act) && active.contains(Arm::Ebem)));
            x2[(i, 7)] =
                f64::from(u8::from(active.contains(Arm::Dul) && active.contains(Arm::Ebem)));
            x2[(i, 8)] = z[1];
            x2[(i, 9)] = z[2];
            y2[i] = rec.y2.unwrap();
        }
        let fit = crate::lasso::lasso_fit(x2.view(), y2.view(), 0.0, 1e-12).unwrap();
        let expected = [0.1, 0.25, 0.3, 0.4, 0.3, -0.1, -1.0, -0.1, 0.25, -0.25];
        for (j, want) in expected.into_iter().enumerate() {
            assert!(
                (fit.coefficients[j] - want).abs() < 1e-6,
                "stage-2 column {j}: {} vs {want}",
                fit.coefficients[j]
            );
        }
        assert!(fit.intercept.abs() < 1e-6, "intercept {}", fit.intercept);

        // Stage 1 on the observed interim outcome. The four stage-1
        // indicators always sum to one, so the first arm folds into the
        // intercept and the rest are contrasts against it.
        let mut x1 = ndarray::Array2::zeros((n, 6));
        let mut y1 = Array1::zeros(n);
        for (i, rec) in records.iter().enumerate() {
            let z = &rec.covariates;
            for arm in [Arm::Act, Arm::Dul, Arm::Ebem] {
                x1[(i, arm.index() - 1)] = f64::from(u8::from(rec.a1 == arm));
            }
            x1[(i, 3)] = z[0] * f64::from(u8::from(rec.a1 == Arm::Ebem));
            x1[(i, 4)] = z[1];
            x1[(i, 5)] = z[2];
            y1[i] = rec.y1;
        }
        let fit = crate::lasso::lasso_fit(x1.view(), y1.view(), 0.0, 1e-12).unwrap();
        assert!(
            (fit.intercept - 0.1).abs() < 1e-6,
            "baseline-arm intercept {}",
            fit.intercept
        );
        let expected = [0.15, 0.2, 0.3, 0.3, 0.25, -0.25];
        for (j, want) in expected.into_iter().enumerate() {
            assert!(
                (fit.coefficients[j] - want).abs() < 1e-6,
                "stage-1 column {j}: {} vs {want}",
                fit.coefficients[j]
            );
        }
    }

    #[test]
    fn pseudo_outcomes_dominate_observed_actions() {
        let mut dgm = DgmConfig::sparse();
        dgm.n_completers = 400;
        let mut rng = replicate_rng(55, 27, 0);
        let records = dgm
            .simulate_trial(&AssignmentPolicy::UniformFeasible, &mut rng)
            .unwrap();
        let design = DesignSpec::for_covariates(dgm.n_covariates());
        let options = QLearnOptions {
            lambda_rule: LambdaRule::Fixed(0.01),
            ..QLearnOptions::default()
        };
        let fit = q_learn(&records, &design, &options, &mut rng).unwrap();
        let pseudo =
            pseudo_outcomes(&records, &fit.stage2, &design, Stage2Mode::Unrestricted).unwrap();
        let mut row = vec![0.0; design.stage2_width()];
        for (rec, tilde) in records.iter().zip(&pseudo) {
            design.fill_stage2_row(&rec.covariates, rec.a2.active_set(rec.a1), &mut row);
            let observed = fit.stage2.predict_row(&row);
            assert!(
                *tilde >= observed - 1e-12,
                "pseudo-outcome {tilde} below observed prediction {observed}"
            );
        }
    }

    #[test]
    fn null_treatment_effect_policy_value_matches_random_policy() {
        // Zero treatment effects and pure-noise outcome: any policy's value
        // is zero (the treatment part vanishes identically).
        let mut dgm = DgmConfig::sparse();
        dgm.main_effects = [0.0; 4];
        dgm.tailoring_coef = 0.0;
        dgm.combo_coefs.clear();
        dgm.prognostic_coefs = (0.0, 0.0);
        dgm.n_completers = 300;
        let mut rng = replicate_rng(55, 28, 0);
        let records = dgm
            .simulate_trial(&AssignmentPolicy::UniformFeasible, &mut rng)
            .unwrap();
        let design = DesignSpec::for_covariates(dgm.n_covariates());
        let options = QLearnOptions {
            lambda_rule: LambdaRule::Fixed(0.05),
            ..QLearnOptions::default()
        };
        let fit = q_learn(&records, &design, &options, &mut rng).unwrap();
        let est = policy_value(&fit.policy, &dgm, 10_000, &mut rng).unwrap();
        assert_abs_diff_eq!(est.mean, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn policy_recovery_on_noiseless_data() {
        // Small-scale version of the recovery check: noiseless records, tiny
        // penalty, fitted policy value-agrees with the oracle on fresh draws.
        let mut dgm = DgmConfig::sparse();
        dgm.noise_sd = 0.0;
        dgm.n_completers = 4_000;
        let mut rng = replicate_rng(55, 29, 0);
        let records = dgm
            .simulate_trial(&AssignmentPolicy::UniformFeasible, &mut rng)
            .unwrap();
        let design = DesignSpec::for_covariates(dgm.n_covariates());
        // A small but nonzero penalty: the mis-specified design carries exact
        // collinearity (each covariate column equals the sum of its four
        // interaction columns), so a strictly zero penalty converges only in
        // fitted values, not coefficients. The induced bias is two orders of
        // magnitude below the smallest decision margin.
        let options = QLearnOptions {
            lambda_rule: LambdaRule::Fixed(1e-3),
            control: FitControl {
                tol: 1e-8,
                max_sweeps: 200_000,
            },
            ..QLearnOptions::default()
        };
        let fit = q_learn(&records, &design, &options, &mut rng).unwrap();
        let oracle = OraclePolicy::new(&dgm).unwrap();

        let mut agree = 0usize;
        let n_eval = 20_000;
        for _ in 0..n_eval {
            let z = dgm.draw_covariates(&mut rng);
            let a1 = fit.policy.stage1(&z);
            let actions = unrestricted_stage2(a1);
            let a2 = fit.policy.stage2(&z, a1, &actions);
            let achieved = dgm.q2_treatment_part(&z, a2.active_set(a1));
            let best = Arm::ALL
                .into_iter()
                .map(|arm| oracle.continuation_value(&z, arm))
                .fold(f64::NEG_INFINITY, f64::max);
            if (achieved - best).abs() < 1e-9 {
                agree += 1;
            }
        }
        let rate = agree as f64 / n_eval as f64;
        assert!(rate >= 0.999, "value agreement rate {rate}");
    }

    #[test]
    fn qlearn_rejects_missing_outcomes() {
        let mut dgm = DgmConfig::sparse();
        dgm.n_completers = 30;
        let mut rng = replicate_rng(55, 30, 0);
        let mut records = dgm
            .simulate_trial(&AssignmentPolicy::UniformFeasible, &mut rng)
            .unwrap();
        records[3].y2 = None;
        let design = DesignSpec::for_covariates(dgm.n_covariates());
        let options = QLearnOptions {
            lambda_rule: LambdaRule::Fixed(0.1),
            ..QLearnOptions::default()
        };
        assert!(q_learn(&records, &design, &options, &mut rng).is_err());
    }

    #[test]
    fn fitted_stage2_respects_supplied_feasible_set() {
        let mut dgm = DgmConfig::sparse();
        dgm.n_completers = 200;
        let mut rng = replicate_rng(55, 31, 0);
        let records = dgm
            .simulate_trial(&AssignmentPolicy::UniformFeasible, &mut rng)
            .unwrap();
        let design = DesignSpec::for_covariates(dgm.n_covariates());
        let options = QLearnOptions {
            lambda_rule: LambdaRule::Fixed(0.02),
            ..QLearnOptions::default()
        };
        let fit = q_learn(&records, &design, &options, &mut rng).unwrap();
        for _ in 0..200 {
            let z = dgm.draw_covariates(&mut rng);
            let a1 = Arm::ALL[rng.random_range(0..4)];
            for responder in ResponderCategory::ALL {
                let feasible = stage2_action_space(
                    Stage2Mode::ResponderDriven,
                    a1,
                    responder,
                    None,
                );
                let chosen = fit.policy.stage2(&z, a1, &feasible);
                assert!(feasible.contains(&chosen));
            }
        }
    }
}
