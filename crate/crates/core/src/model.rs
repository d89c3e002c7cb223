//! Domain types for the two-stage trial: arms, responder categories, the
//! stage-2 action space, and the feasibility rules connecting them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four study arms with their stable integer codes.
///
/// Codes 0..3 are frozen in the CSV schema (see `docs/SCHEMA.md`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Enhanced self-care.
    Esc = 0,
    /// Acceptance and commitment therapy.
    Act = 1,
    /// Duloxetine.
    Dul = 2,
    /// Evidence-based exercise and manual therapy.
    Ebem = 3,
}

pub const N_ARMS: usize = 4;

impl Arm {
    pub const ALL: [Arm; N_ARMS] = [Arm::Esc, Arm::Act, Arm::Dul, Arm::Ebem];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Result<Arm> {
        match code {
            0 => Ok(Arm::Esc),
            1 => Ok(Arm::Act),
            2 => Ok(Arm::Dul),
            3 => Ok(Arm::Ebem),
            other => Err(Error::Data(format!("unknown arm code {other}"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Esc => "esc",
            Arm::Act => "act",
            Arm::Dul => "dul",
            Arm::Ebem => "ebem",
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Small set of arms, used for stage-2 active treatment sets and feasibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ArmSet(u8);

impl ArmSet {
    pub const EMPTY: ArmSet = ArmSet(0);

    pub fn all() -> ArmSet {
        ArmSet(0b1111)
    }

    pub fn single(arm: Arm) -> ArmSet {
        ArmSet(1 << arm.code())
    }

    pub fn pair(a: Arm, b: Arm) -> ArmSet {
        ArmSet((1 << a.code()) | (1 << b.code()))
    }

    pub fn insert(&mut self, arm: Arm) {
        self.0 |= 1 << arm.code();
    }

    pub fn remove(&mut self, arm: Arm) {
        self.0 &= !(1 << arm.code());
    }

    pub fn contains(self, arm: Arm) -> bool {
        self.0 & (1 << arm.code()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Arm> {
        Arm::ALL.into_iter().filter(move |a| self.contains(*a))
    }
}

impl FromIterator<Arm> for ArmSet {
    fn from_iter<I: IntoIterator<Item = Arm>>(iter: I) -> Self {
        let mut set = ArmSet::EMPTY;
        for arm in iter {
            set.insert(arm);
        }
        set
    }
}

/// Interim response category derived from the 12-week PGIC and PEG.
///
/// Codes 1..4 are frozen in the CSV schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponderCategory {
    /// PGIC 1-2 and PEG < 4: continues the first-stage treatment.
    BestResponder = 1,
    /// PGIC 1-2 and PEG >= 4: continues and augments.
    ResponderHighPeg = 2,
    /// PGIC 3-4: randomized to augment or switch.
    Intermediate = 3,
    /// PGIC 5-7: switches to a new treatment.
    NonResponder = 4,
}

impl ResponderCategory {
    pub const ALL: [ResponderCategory; 4] = [
        ResponderCategory::BestResponder,
        ResponderCategory::ResponderHighPeg,
        ResponderCategory::Intermediate,
        ResponderCategory::NonResponder,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<ResponderCategory> {
        match code {
            1 => Ok(ResponderCategory::BestResponder),
            2 => Ok(ResponderCategory::ResponderHighPeg),
            3 => Ok(ResponderCategory::Intermediate),
            4 => Ok(ResponderCategory::NonResponder),
            other => Err(Error::Data(format!("unknown responder code {other}"))),
        }
    }
}

/// Maps the 12-week PGIC (1-7) and PEG (0-10) to a responder category.
///
/// The mapping is total over the valid domain; out-of-range inputs are
/// rejected.
pub fn classify_responder(pgic: u8, peg: f64) -> Result<ResponderCategory> {
    if !(1..=7).contains(&pgic) {
        return Err(Error::Data(format!("PGIC {pgic} outside 1..=7")));
    }
    if !(0.0..=10.0).contains(&peg) {
        return Err(Error::Data(format!("PEG {peg} outside 0..=10")));
    }
    Ok(match pgic {
        1 | 2 if peg < 4.0 => ResponderCategory::BestResponder,
        1 | 2 => ResponderCategory::ResponderHighPeg,
        3 | 4 => ResponderCategory::Intermediate,
        _ => ResponderCategory::NonResponder,
    })
}

/// A stage-2 treatment decision.
///
/// `Keep` continues the stage-1 arm, `Augment` adds a second arm, `Switch`
/// replaces the stage-1 arm. The new arm must differ from the stage-1 arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Action {
    Keep,
    Augment(Arm),
    Switch(Arm),
}

impl Stage2Action {
    /// The set of treatments active during stage 2, given the stage-1 arm.
    pub fn active_set(self, a1: Arm) -> ArmSet {
        match self {
            Stage2Action::Keep => ArmSet::single(a1),
            Stage2Action::Augment(new) => ArmSet::pair(a1, new),
            Stage2Action::Switch(new) => ArmSet::single(new),
        }
    }

    pub fn new_arm(self) -> Option<Arm> {
        match self {
            Stage2Action::Keep => None,
            Stage2Action::Augment(a) | Stage2Action::Switch(a) => Some(a),
        }
    }

    /// Kind code for the CSV schema: keep=0, augment=1, switch=2.
    pub fn kind_code(self) -> u8 {
        match self {
            Stage2Action::Keep => 0,
            Stage2Action::Augment(_) => 1,
            Stage2Action::Switch(_) => 2,
        }
    }

    pub fn from_codes(kind: u8, new_arm: Option<u8>) -> Result<Stage2Action> {
        match (kind, new_arm) {
            (0, None) => Ok(Stage2Action::Keep),
            (1, Some(a)) => Ok(Stage2Action::Augment(Arm::from_code(a)?)),
            (2, Some(a)) => Ok(Stage2Action::Switch(Arm::from_code(a)?)),
            _ => Err(Error::Data(format!(
                "invalid stage-2 action encoding kind={kind} new_arm={new_arm:?}"
            ))),
        }
    }

    pub fn validate(self, a1: Arm) -> Result<()> {
        if self.new_arm() == Some(a1) {
            return Err(Error::Data(format!(
                "stage-2 action {self:?} re-adds the stage-1 arm {a1}"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Stage2Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage2Action::Keep => write!(f, "keep"),
            Stage2Action::Augment(a) => write!(f, "augment({a})"),
            Stage2Action::Switch(a) => write!(f, "switch({a})"),
        }
    }
}

/// Stage-2 actions permitted by the trial rules for a stage-1 arm, responder
/// category, and optional excluded arm.
///
/// Participants who started on ESC never switch: ESC skills persist, so a
/// non-continuing ESC starter is relabeled as augmenting and ESC stays in the
/// active set. The returned order is deterministic (Keep, then Augment by arm
/// code, then Switch by arm code).
pub fn feasible_stage2(
    a1: Arm,
    responder: ResponderCategory,
    excluded: Option<Arm>,
) -> Vec<Stage2Action> {
    assert_ne!(Some(a1), excluded, "stage-1 arm cannot be the excluded arm");
    let candidates =
        Arm::ALL.into_iter().filter(|k| *k != a1 && Some(*k) != excluded);
    let mut out = Vec::with_capacity(7);
    match responder {
        ResponderCategory::BestResponder => out.push(Stage2Action::Keep),
        ResponderCategory::ResponderHighPeg => {
            out.extend(candidates.map(Stage2Action::Augment));
        }
        ResponderCategory::Intermediate => {
            let ks: Vec<Arm> = candidates.collect();
            out.extend(ks.iter().copied().map(Stage2Action::Augment));
            if a1 != Arm::Esc {
                out.extend(ks.into_iter().map(Stage2Action::Switch));
            }
        }
        ResponderCategory::NonResponder => {
            if a1 == Arm::Esc {
                out.extend(candidates.map(Stage2Action::Augment));
            } else {
                out.extend(candidates.map(Stage2Action::Switch));
            }
        }
    }
    assert!(
        !out.is_empty(),
        "feasible stage-2 set is empty for a1={a1} responder={responder:?} excluded={excluded:?}"
    );
    out
}

/// The full stage-2 action space for a stage-1 arm, ignoring responder status
/// and exclusions: Keep, every Augment, every Switch.
///
/// Used by the unrestricted simulation mode, where the stage-2 action law is
/// the plain indicator algebra of the outcome model.
pub fn unrestricted_stage2(a1: Arm) -> Vec<Stage2Action> {
    let mut out = Vec::with_capacity(7);
    out.push(Stage2Action::Keep);
    out.extend(Arm::ALL.into_iter().filter(|k| *k != a1).map(Stage2Action::Augment));
    out.extend(Arm::ALL.into_iter().filter(|k| *k != a1).map(Stage2Action::Switch));
    out
}

/// One participant's record across both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub id: u32,
    pub site: u16,
    pub covariates: Vec<f64>,
    pub excluded_arm: Option<Arm>,
    /// Early discontinuation of the stage-1 treatment forces non-responder
    /// routing (always switch) regardless of the observed category.
    pub early_discontinuation: bool,
    pub a1: Arm,
    /// Outcome change at the end of stage 1 (standardized effect scale).
    pub y1: f64,
    pub responder: ResponderCategory,
    pub a2: Stage2Action,
    /// Primary outcome at the end of stage 2; present iff the participant is
    /// a completer.
    pub y2: Option<f64>,
}

impl ParticipantRecord {
    /// Responder category after applying the early-discontinuation override.
    pub fn effective_responder(&self) -> ResponderCategory {
        if self.early_discontinuation {
            ResponderCategory::NonResponder
        } else {
            self.responder
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(excl) = self.excluded_arm {
            if excl == self.a1 {
                return Err(Error::Data(format!(
                    "participant {}: stage-1 arm {} is the excluded arm",
                    self.id, self.a1
                )));
            }
            if self.a2.active_set(self.a1).contains(excl) {
                return Err(Error::Data(format!(
                    "participant {}: excluded arm {} appears in the stage-2 active set",
                    self.id, excl
                )));
            }
        }
        self.a2.validate(self.a1).map_err(|_| {
            Error::Data(format!(
                "participant {}: stage-2 action {} re-adds stage-1 arm {}",
                self.id, self.a2, self.a1
            ))
        })
    }
}

/// A two-stage treatment rule. Stage 2 must choose from the feasible actions
/// supplied by the caller.
pub trait TreatmentPolicy {
    fn stage1(&self, covariates: &[f64]) -> Arm;
    fn stage2(&self, covariates: &[f64], a1: Arm, feasible: &[Stage2Action]) -> Stage2Action;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_codes_are_stable() {
        for (i, arm) in Arm::ALL.into_iter().enumerate() {
            assert_eq!(arm.code() as usize, i);
            assert_eq!(Arm::from_code(i as u8).unwrap(), arm);
        }
        assert!(Arm::from_code(4).is_err());
    }

    #[test]
    fn classify_matches_category_rules() {
        assert_eq!(
            classify_responder(2, 3.9).unwrap(),
            ResponderCategory::BestResponder
        );
        // PEG >= 4 boundary is inclusive on the high side.
        assert_eq!(
            classify_responder(2, 4.0).unwrap(),
            ResponderCategory::ResponderHighPeg
        );
        assert_eq!(
            classify_responder(3, 0.0).unwrap(),
            ResponderCategory::Intermediate
        );
        assert_eq!(
            classify_responder(7, 0.0).unwrap(),
            ResponderCategory::NonResponder
        );
    }

    #[test]
    fn classify_rejects_out_of_range() {
        assert!(classify_responder(0, 5.0).is_err());
        assert!(classify_responder(8, 5.0).is_err());
        assert!(classify_responder(3, -0.1).is_err());
        assert!(classify_responder(3, 10.1).is_err());
    }

    #[test]
    fn classify_partitions_full_grid() {
        // PGIC 1..7 crossed with PEG 0.0..=10.0 at 0.1 resolution.
        for pgic in 1..=7u8 {
            for tenth in 0..=100u32 {
                let peg = f64::from(tenth) / 10.0;
                let cat = classify_responder(pgic, peg).unwrap();
                let expected = match (pgic, peg < 4.0) {
                    (1..=2, true) => ResponderCategory::BestResponder,
                    (1..=2, false) => ResponderCategory::ResponderHighPeg,
                    (3..=4, _) => ResponderCategory::Intermediate,
                    _ => ResponderCategory::NonResponder,
                };
                assert_eq!(cat, expected, "pgic={pgic} peg={peg}");
            }
        }
    }

    #[test]
    fn best_responder_keeps() {
        let set = feasible_stage2(Arm::Act, ResponderCategory::BestResponder, None);
        assert_eq!(set, vec![Stage2Action::Keep]);
    }

    #[test]
    fn non_responder_with_exclusion_switches_to_remaining_arms() {
        let set = feasible_stage2(
            Arm::Dul,
            ResponderCategory::NonResponder,
            Some(Arm::Ebem),
        );
        assert_eq!(
            set,
            vec![Stage2Action::Switch(Arm::Esc), Stage2Action::Switch(Arm::Act)]
        );
    }

    #[test]
    fn esc_non_responder_is_relabeled_as_augment() {
        let set = feasible_stage2(Arm::Esc, ResponderCategory::NonResponder, None);
        assert_eq!(
            set,
            vec![
                Stage2Action::Augment(Arm::Act),
                Stage2Action::Augment(Arm::Dul),
                Stage2Action::Augment(Arm::Ebem),
            ]
        );
        // Relabeling keeps ESC in the active set.
        assert!(set[0].active_set(Arm::Esc).contains(Arm::Esc));
    }

    #[test]
    fn esc_intermediate_deduplicates_relabeled_switches() {
        let set = feasible_stage2(Arm::Esc, ResponderCategory::Intermediate, None);
        assert_eq!(set.len(), 3);
        assert!(set.iter().all(|a| matches!(a, Stage2Action::Augment(_))));
    }

    #[test]
    fn feasible_set_is_never_empty() {
        for a1 in Arm::ALL {
            for responder in ResponderCategory::ALL {
                for excluded in
                    std::iter::once(None).chain(Arm::ALL.into_iter().map(Some))
                {
                    if excluded == Some(a1) {
                        continue;
                    }
                    let set = feasible_stage2(a1, responder, excluded);
                    assert!(!set.is_empty());
                    for action in &set {
                        action.validate(a1).unwrap();
                        if let Some(excl) = excluded {
                            assert!(!action.active_set(a1).contains(excl));
                        }
                        if a1 == Arm::Esc {
                            assert!(!matches!(action, Stage2Action::Switch(_)));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unrestricted_space_has_seven_actions() {
        for a1 in Arm::ALL {
            let set = unrestricted_stage2(a1);
            assert_eq!(set.len(), 7);
            for action in set {
                action.validate(a1).unwrap();
            }
        }
    }

    #[test]
    fn active_sets() {
        assert_eq!(
            Stage2Action::Keep.active_set(Arm::Dul).iter().collect::<Vec<_>>(),
            vec![Arm::Dul]
        );
        let augment = Stage2Action::Augment(Arm::Ebem).active_set(Arm::Dul);
        assert_eq!(augment.len(), 2);
        assert!(augment.contains(Arm::Dul) && augment.contains(Arm::Ebem));
        assert_eq!(
            Stage2Action::Switch(Arm::Act).active_set(Arm::Dul).iter().collect::<Vec<_>>(),
            vec![Arm::Act]
        );
    }

    #[test]
    fn early_discontinuation_forces_non_responder_routing() {
        let rec = ParticipantRecord {
            id: 1,
            site: 0,
            covariates: vec![],
            excluded_arm: None,
            early_discontinuation: true,
            a1: Arm::Act,
            y1: 0.0,
            responder: ResponderCategory::BestResponder,
            a2: Stage2Action::Switch(Arm::Dul),
            y2: Some(0.0),
        };
        assert_eq!(rec.effective_responder(), ResponderCategory::NonResponder);
    }

    #[test]
    fn record_validation_catches_excluded_arm_in_active_set() {
        let rec = ParticipantRecord {
            id: 7,
            site: 0,
            covariates: vec![],
            excluded_arm: Some(Arm::Ebem),
            early_discontinuation: false,
            a1: Arm::Act,
            y1: 0.0,
            responder: ResponderCategory::Intermediate,
            a2: Stage2Action::Augment(Arm::Ebem),
            y2: Some(0.0),
        };
        assert!(rec.validate().is_err());
    }
}
