//! Covariate-adaptive minimization with treatment exclusions and biased-coin
//! assignment.
//!
//! For each candidate arm `k` the imbalance score is the marginal
//! discrepancy over binary balancing factors,
//!
//! ```text
//! S_k = max_{k' != k} sum_p w_p * |(n[k][p] + x_p) - n[k'][p]|
//! ```
//!
//! where `n[k][p]` counts prior participants with factor `p` equal to one
//! assigned to arm `k` and `x` is the incoming participant's zero-one factor
//! vector. Scores are computed for every arm, the argmin is taken over the
//! participant's feasible arms with ties broken uniformly at random, and the
//! favored arm is assigned with probability `rho` (each other feasible arm
//! with probability `(1 - rho) / (|feasible| - 1)`).
//!
//! The engine is generic over the number of "arms" so the same machinery
//! drives stage-1 treatment assignment, the stage-2 augment-vs-switch coin,
//! and stage-2 treatment assignment. Each randomization context keeps its own
//! [`MinimizationState`].

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arm, ArmSet, N_ARMS};
use crate::runner::derive_seed;

/// RNG stream context tag for the standalone randomization workflow.
const CTX_RANDOMIZE: u64 = 0x52414e44;

/// Knobs of the minimization procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimizationConfig {
    /// Probability of assigning the imbalance-minimizing arm.
    pub rho: f64,
    /// Per-factor balancing weights (omega).
    pub factor_weights: Vec<f64>,
    /// Per-arm weights (alpha), applied as `S_k <- alpha_k * S_k` before the
    /// argmin. All ones by default, which reduces to the plain marginal
    /// discrepancy.
    pub arm_weights: Vec<f64>,
    /// Names of the balancing factors, for audit output.
    pub factor_names: Vec<String>,
}

impl MinimizationConfig {
    /// Stage-1 defaults: four arms, rho = 2/3, all weights one.
    pub fn stage1() -> Self {
        MinimizationConfig {
            rho: 2.0 / 3.0,
            factor_weights: vec![1.0; 4],
            arm_weights: vec![1.0; N_ARMS],
            factor_names: visit1_factor_names(),
        }
    }

    /// Stage-2 treatment assignment: pain duration and phenotyping consent
    /// carry weight 2. For intermediate responders the augment/switch
    /// indicator joins as a fifth factor with weight 1.
    pub fn stage2_treatment(intermediate: bool) -> Self {
        let mut factor_weights = vec![1.0, 2.0, 1.0, 2.0];
        let mut factor_names = visit1_factor_names();
        if intermediate {
            factor_weights.push(1.0);
            factor_names.push("augment".to_string());
        }
        MinimizationConfig {
            rho: 2.0 / 3.0,
            factor_weights,
            arm_weights: vec![1.0; N_ARMS],
            factor_names,
        }
    }

    /// The two-option augment-vs-switch randomization for intermediate
    /// responders, balanced on the stage-2 factor set.
    pub fn augment_switch() -> Self {
        MinimizationConfig {
            rho: 2.0 / 3.0,
            factor_weights: vec![1.0, 2.0, 1.0, 2.0],
            arm_weights: vec![1.0; 2],
            factor_names: visit1_factor_names(),
        }
    }

    /// Uniform config: `n_arms` options balanced on `n_factors` unweighted
    /// factors.
    pub fn uniform_weights(n_arms: usize, n_factors: usize, rho: f64) -> Self {
        MinimizationConfig {
            rho,
            factor_weights: vec![1.0; n_factors],
            arm_weights: vec![1.0; n_arms],
            factor_names: (0..n_factors).map(|i| format!("f{}", i + 1)).collect(),
        }
    }

    pub fn n_arms(&self) -> usize {
        self.arm_weights.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factor_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho {} outside (0, 1]", self.rho)));
        }
        if self.factor_weights.is_empty() {
            return Err(Error::Config("at least one balancing factor required".into()));
        }
        if self.arm_weights.len() < 2 {
            return Err(Error::Config("minimization needs at least two arms".into()));
        }
        if self.factor_weights.iter().chain(&self.arm_weights).any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("weights must be nonnegative and finite".into()));
        }
        if self.factor_names.len() != self.factor_weights.len() {
            return Err(Error::Config(format!(
                "{} factor names for {} factors",
                self.factor_names.len(),
                self.factor_weights.len()
            )));
        }
        Ok(())
    }

    /// Tie tolerance for score comparisons. Integer weights keep every score
    /// an exactly representable integer, so ties compare exactly; otherwise a
    /// small relative tolerance applies.
    fn tie_tolerance(&self, score_scale: f64) -> f64 {
        let integral = self
            .factor_weights
            .iter()
            .chain(&self.arm_weights)
            .all(|w| w.fract() == 0.0);
        if integral {
            0.0
        } else {
            1e-12 * score_scale.abs().max(1.0)
        }
    }
}

fn visit1_factor_names() -> Vec<String> {
    ["dep_anx", "pain_duration_ge5", "opioid_use", "phenotyping_consent"]
        .into_iter()
        .map(String::from)
        .collect()
}

/// Per-arm, per-factor assignment counts. Append-only: replaying an
/// assignment log reproduces the state exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimizationState {
    /// `counts[k][p]` = participants with factor `p` equal to one on arm `k`.
    counts: Vec<Vec<u64>>,
    arm_totals: Vec<u64>,
    /// `site_counts[s][k]` = participants at site `s` on arm `k`. Sites are
    /// measured, never balanced.
    site_counts: Vec<Vec<u64>>,
}

impl MinimizationState {
    pub fn new(n_arms: usize, n_factors: usize) -> Self {
        MinimizationState {
            counts: vec![vec![0; n_factors]; n_arms],
            arm_totals: vec![0; n_arms],
            site_counts: Vec::new(),
        }
    }

    pub fn n_arms(&self) -> usize {
        self.arm_totals.len()
    }

    pub fn n_factors(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn arm_totals(&self) -> &[u64] {
        &self.arm_totals
    }

    pub fn total(&self) -> u64 {
        self.arm_totals.iter().sum()
    }

    /// Count of factor-one participants on `arm` for factor `p`.
    pub fn factor_count(&self, arm: usize, p: usize) -> u64 {
        self.counts[arm][p]
    }

    /// Per-site arm counts, indexed `[site][arm]`.
    pub fn site_counts(&self) -> &[Vec<u64>] {
        &self.site_counts
    }

    /// Records an assignment. `factors` uses zero-one coding.
    pub fn record(&mut self, arm: usize, factors: &[u8], site: Option<usize>) {
        debug_assert_eq!(factors.len(), self.n_factors());
        for (count, &x) in self.counts[arm].iter_mut().zip(factors) {
            *count += u64::from(x);
        }
        self.arm_totals[arm] += 1;
        if let Some(site) = site {
            if site >= self.site_counts.len() {
                self.site_counts.resize(site + 1, vec![0; self.n_arms()]);
            }
            self.site_counts[site][arm] += 1;
        }
    }
}

/// Marginal-discrepancy scores for every arm, with arm weights applied.
pub fn imbalance_scores(
    state: &MinimizationState,
    factors: &[u8],
    config: &MinimizationConfig,
) -> Result<Vec<f64>> {
    if factors.len() != config.n_factors() || state.n_factors() != config.n_factors() {
        return Err(Error::Dimension {
            context: "factor vector",
            expected: config.n_factors(),
            actual: factors.len(),
        });
    }
    if state.n_arms() != config.n_arms() {
        return Err(Error::Dimension {
            context: "minimization state arms",
            expected: config.n_arms(),
            actual: state.n_arms(),
        });
    }
    let n_arms = state.n_arms();
    let scores = (0..n_arms)
        .map(|k| {
            let worst = (0..n_arms)
                .filter(|k2| *k2 != k)
                .map(|k2| {
                    (0..config.n_factors())
                        .map(|p| {
                            let hypothetical =
                                state.counts[k][p] + u64::from(factors[p]);
                            let diff = hypothetical.abs_diff(state.counts[k2][p]);
                            config.factor_weights[p] * diff as f64
                        })
                        .sum::<f64>()
                })
                .fold(0.0_f64, f64::max);
            config.arm_weights[k] * worst
        })
        .collect();
    Ok(scores)
}

/// Marginal-discrepancy score for a single candidate arm.
pub fn imbalance_score(
    state: &MinimizationState,
    factors: &[u8],
    candidate: usize,
    config: &MinimizationConfig,
) -> Result<f64> {
    Ok(imbalance_scores(state, factors, config)?[candidate])
}

/// Outcome of one minimization step, sufficient for the audit log.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentOutcome {
    /// Scores for all arms, feasible or not.
    pub scores: Vec<f64>,
    /// Tie-broken argmin over the feasible set.
    pub favored: usize,
    /// Whether the biased coin landed on the favored arm.
    pub coin_favored: bool,
    pub assigned: usize,
}

/// One step of minimization with treatment exclusions.
///
/// Scores are computed for all arms; the argmin and the biased coin are
/// restricted to `feasible`. Updates `state` with the result.
pub fn assign<R: Rng + ?Sized>(
    state: &mut MinimizationState,
    factors: &[u8],
    feasible: &[usize],
    config: &MinimizationConfig,
    rng: &mut R,
) -> Result<AssignmentOutcome> {
    assign_at_site(state, factors, feasible, None, config, rng)
}

/// As [`assign`], recording the participant's site for balance reporting.
pub fn assign_at_site<R: Rng + ?Sized>(
    state: &mut MinimizationState,
    factors: &[u8],
    feasible: &[usize],
    site: Option<usize>,
    config: &MinimizationConfig,
    rng: &mut R,
) -> Result<AssignmentOutcome> {
    if feasible.is_empty() {
        return Err(Error::Empty("feasible arm set"));
    }
    if feasible.iter().any(|k| *k >= config.n_arms()) {
        return Err(Error::Data("feasible arm outside the configured arms".into()));
    }
    let scores = imbalance_scores(state, factors, config)?;

    let min_score = feasible
        .iter()
        .map(|k| scores[*k])
        .fold(f64::INFINITY, f64::min);
    let tol = config.tie_tolerance(min_score);
    let tied: Vec<usize> = feasible
        .iter()
        .copied()
        .filter(|k| scores[*k] <= min_score + tol)
        .collect();
    let favored = if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.random_range(0..tied.len())]
    };

    let (assigned, coin_favored) = if feasible.len() == 1 {
        (favored, true)
    } else if rng.random::<f64>() < config.rho {
        (favored, true)
    } else {
        let others: Vec<usize> =
            feasible.iter().copied().filter(|k| *k != favored).collect();
        (others[rng.random_range(0..others.len())], false)
    };

    state.record(assigned, factors, site);
    Ok(AssignmentOutcome {
        scores,
        favored,
        coin_favored,
        assigned,
    })
}

/// Stage-2 augment-vs-switch decision for intermediate responders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOrSwitch {
    Augment,
    Switch,
}

/// Randomizes an intermediate responder to augment or switch, minimizing over
/// the two options with the stage-2 factor set.
pub fn assign_augment_or_switch<R: Rng + ?Sized>(
    state2: &mut MinimizationState,
    factors: &[u8],
    config: &MinimizationConfig,
    rng: &mut R,
) -> Result<AugmentOrSwitch> {
    if config.n_arms() != 2 {
        return Err(Error::Config(
            "augment/switch minimization requires a two-option config".into(),
        ));
    }
    let outcome = assign(state2, factors, &[0, 1], config, rng)?;
    Ok(if outcome.assigned == 0 {
        AugmentOrSwitch::Augment
    } else {
        AugmentOrSwitch::Switch
    })
}

/// The four Visit-1 binary balancing factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Visit1Factors {
    pub dep_anx: bool,
    pub pain_duration_ge5: bool,
    pub opioid_use: bool,
    pub phenotyping_consent: bool,
}

impl Visit1Factors {
    /// Stage-1 factor vector; all weights are one.
    pub fn stage1_vector(&self) -> Vec<u8> {
        vec![
            u8::from(self.dep_anx),
            u8::from(self.pain_duration_ge5),
            u8::from(self.opioid_use),
            u8::from(self.phenotyping_consent),
        ]
    }
}

/// Stage-2 factor vector and weights.
///
/// The four Visit-1 factors carry weights (1, 2, 1, 2): pain duration and
/// phenotyping consent are doubled. For intermediate-responder treatment
/// minimization the augment/switch indicator joins as a fifth factor with
/// weight 1.
pub fn stage2_factor_vector(
    factors: &Visit1Factors,
    augment_assigned: Option<bool>,
) -> (Vec<u8>, Vec<f64>) {
    let mut x = factors.stage1_vector();
    let mut weights = vec![1.0, 2.0, 1.0, 2.0];
    if let Some(augment) = augment_assigned {
        x.push(u8::from(augment));
        weights.push(1.0);
    }
    (x, weights)
}

/// One row of the assignment audit log.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRecord {
    /// 1-based assignment order.
    pub seq: u32,
    pub participant_id: u32,
    pub factors: Vec<u8>,
    pub excluded_arm: Option<Arm>,
    pub feasible: ArmSet,
    pub scores: Vec<f64>,
    pub favored: Arm,
    pub coin_favored: bool,
    pub assigned: Arm,
    /// RNG seed the run was started with.
    pub rng_seed: u64,
    /// ChaCha word position before this assignment's draws.
    pub rng_word_pos: u128,
}

/// RNG used by the standalone randomization workflow and its replay.
pub fn randomization_rng(master_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master_seed, CTX_RANDOMIZE))
}

/// Assigns one participant over the four study arms and emits the audit row.
pub fn assign_with_audit(
    state: &mut MinimizationState,
    participant_id: u32,
    seq: u32,
    factors: &[u8],
    excluded_arm: Option<Arm>,
    site: Option<usize>,
    config: &MinimizationConfig,
    master_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<AuditRecord> {
    if config.n_arms() != N_ARMS {
        return Err(Error::Config("audited assignment expects the four study arms".into()));
    }
    let feasible: Vec<usize> = Arm::ALL
        .into_iter()
        .filter(|a| Some(*a) != excluded_arm)
        .map(Arm::index)
        .collect();
    let rng_word_pos = rng.get_word_pos();
    let outcome = assign_at_site(state, factors, &feasible, site, config, rng)?;
    Ok(AuditRecord {
        seq,
        participant_id,
        factors: factors.to_vec(),
        excluded_arm,
        feasible: feasible
            .iter()
            .map(|k| Arm::from_code(*k as u8).expect("arm index"))
            .collect(),
        scores: outcome.scores,
        favored: Arm::from_code(outcome.favored as u8).expect("arm index"),
        coin_favored: outcome.coin_favored,
        assigned: Arm::from_code(outcome.assigned as u8).expect("arm index"),
        rng_seed: master_seed,
        rng_word_pos,
    })
}

/// Verifies an audit log by replaying it and returns the reconstructed state.
///
/// Structural checks (always): recomputed scores match, the favored arm lies
/// in the feasible argmin tie set, the assignment is consistent with the coin
/// outcome, and no assignment is infeasible. With `verify_seed`, the full RNG
/// sequence is replayed and favored arm, coin, assignment, and stream
/// positions must reproduce bit-exactly.
pub fn replay_audit(
    records: &[AuditRecord],
    config: &MinimizationConfig,
    verify_seed: Option<u64>,
) -> Result<MinimizationState> {
    config.validate()?;
    let mut state = MinimizationState::new(config.n_arms(), config.n_factors());
    let mut rng = verify_seed.map(randomization_rng);

    for (i, rec) in records.iter().enumerate() {
        let row = i + 1;
        let fail = |reason: String| Error::ReplayMismatch { row, reason };

        let scores = imbalance_scores(&state, &rec.factors, config)?;
        for (k, (got, expect)) in rec.scores.iter().zip(&scores).enumerate() {
            if got != expect {
                return Err(fail(format!(
                    "score for arm {k}: logged {got}, recomputed {expect}"
                )));
            }
        }
        let feasible: Vec<usize> = rec.feasible.iter().map(Arm::index).collect();
        if feasible.is_empty() {
            return Err(fail("empty feasible set".into()));
        }
        if let Some(excl) = rec.excluded_arm {
            if rec.feasible.contains(excl) {
                return Err(fail(format!("excluded arm {excl} listed as feasible")));
            }
        }
        let min_score = feasible
            .iter()
            .map(|k| scores[*k])
            .fold(f64::INFINITY, f64::min);
        let tol = config.tie_tolerance(min_score);
        if scores[rec.favored.index()] > min_score + tol {
            return Err(fail(format!(
                "favored arm {} does not minimize the feasible scores",
                rec.favored
            )));
        }
        if !rec.feasible.contains(rec.assigned) {
            return Err(fail(format!("assigned arm {} is infeasible", rec.assigned)));
        }
        if rec.coin_favored != (rec.assigned == rec.favored) {
            return Err(fail("coin outcome inconsistent with assigned arm".into()));
        }

        if let Some(rng) = rng.as_mut() {
            if rng.get_word_pos() != rec.rng_word_pos {
                return Err(fail(format!(
                    "rng position {} does not match logged {}",
                    rng.get_word_pos(),
                    rec.rng_word_pos
                )));
            }
            let mut shadow = state.clone();
            let outcome = assign_at_site(&mut shadow, &rec.factors, &feasible, None, config, rng)?;
            if outcome.favored != rec.favored.index()
                || outcome.coin_favored != rec.coin_favored
                || outcome.assigned != rec.assigned.index()
            {
                return Err(fail(format!(
                    "rng replay produced favored={} coin={} assigned={}, log has favored={} coin={} assigned={}",
                    outcome.favored,
                    outcome.coin_favored,
                    outcome.assigned,
                    rec.favored.index(),
                    rec.coin_favored,
                    rec.assigned.index()
                )));
            }
        }

        state.record(rec.assigned.index(), &rec.factors, None);
    }
    Ok(state)
}
