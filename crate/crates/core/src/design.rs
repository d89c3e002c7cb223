//! Regression design construction for the two stage models.
//!
//! Stage 1: four arm indicators, the covariates, and every arm-by-covariate
//! product. Stage 2: four active-treatment indicators, the six pairwise
//! active-set products, the covariates, and every indicator-by-covariate
//! product. Column construction is deterministic and order-stable; the
//! estimator's function class deliberately includes interactions with every
//! covariate, nuisance ones included.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arm, ArmSet, ParticipantRecord, N_ARMS};

/// All unordered arm pairs, in (low, high) code order.
pub const ARM_PAIRS: [(Arm, Arm); 6] = [
    (Arm::Esc, Arm::Act),
    (Arm::Esc, Arm::Dul),
    (Arm::Esc, Arm::Ebem),
    (Arm::Act, Arm::Dul),
    (Arm::Act, Arm::Ebem),
    (Arm::Dul, Arm::Ebem),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub covariate_names: Vec<String>,
    /// Include the pairwise active-set product columns in the stage-2 design.
    pub include_pairwise: bool,
}

impl DesignSpec {
    /// Default design over `n` covariates named `z1..zn`.
    pub fn for_covariates(n: usize) -> Self {
        DesignSpec {
            covariate_names: (1..=n).map(|i| format!("z{i}")).collect(),
            include_pairwise: true,
        }
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn stage1_width(&self) -> usize {
        let p = self.n_covariates();
        N_ARMS + p + N_ARMS * p
    }

    pub fn stage2_width(&self) -> usize {
        let p = self.n_covariates();
        let pairs = if self.include_pairwise { ARM_PAIRS.len() } else { 0 };
        N_ARMS + pairs + p + N_ARMS * p
    }

    /// Penalty multipliers for the stage-1 columns: zero on the arm
    /// indicators (shielded from shrinkage), one elsewhere.
    pub fn stage1_penalty_factors(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.stage1_width()];
        for slot in w.iter_mut().take(N_ARMS) {
            *slot = 0.0;
        }
        w
    }

    /// Penalty multipliers for the stage-2 columns: zero on the action
    /// encoding (active-set indicators and pair products), one elsewhere.
    pub fn stage2_penalty_factors(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.stage2_width()];
        let n_action = N_ARMS + if self.include_pairwise { ARM_PAIRS.len() } else { 0 };
        for slot in w.iter_mut().take(n_action) {
            *slot = 0.0;
        }
        w
    }

    pub fn stage1_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.stage1_width());
        for arm in Arm::ALL {
            names.push(format!("a1_{arm}"));
        }
        names.extend(self.covariate_names.iter().cloned());
        for arm in Arm::ALL {
            for z in &self.covariate_names {
                names.push(format!("a1_{arm}:{z}"));
            }
        }
        names
    }

    pub fn stage2_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.stage2_width());
        for arm in Arm::ALL {
            names.push(format!("a2_{arm}"));
        }
        if self.include_pairwise {
            for (a, b) in ARM_PAIRS {
                names.push(format!("a2_{a}*a2_{b}"));
            }
        }
        names.extend(self.covariate_names.iter().cloned());
        for arm in Arm::ALL {
            for z in &self.covariate_names {
                names.push(format!("a2_{arm}:{z}"));
            }
        }
        names
    }

    /// Writes the stage-1 row for `(z, a1)` into `out`.
    pub fn fill_stage1_row(&self, z: &[f64], a1: Arm, out: &mut [f64]) {
        let p = self.n_covariates();
        debug_assert_eq!(z.len(), p);
        debug_assert_eq!(out.len(), self.stage1_width());
        out.fill(0.0);
        out[a1.index()] = 1.0;
        out[N_ARMS..N_ARMS + p].copy_from_slice(z);
        let base = N_ARMS + p + a1.index() * p;
        out[base..base + p].copy_from_slice(z);
    }

    /// Writes the stage-2 row for `(z, active set)` into `out`.
    pub fn fill_stage2_row(&self, z: &[f64], active: ArmSet, out: &mut [f64]) {
        let p = self.n_covariates();
        debug_assert_eq!(z.len(), p);
        debug_assert_eq!(out.len(), self.stage2_width());
        out.fill(0.0);
        for arm in active.iter() {
            out[arm.index()] = 1.0;
        }
        let mut offset = N_ARMS;
        if self.include_pairwise {
            for (i, (a, b)) in ARM_PAIRS.into_iter().enumerate() {
                if active.contains(a) && active.contains(b) {
                    out[offset + i] = 1.0;
                }
            }
            offset += ARM_PAIRS.len();
        }
        out[offset..offset + p].copy_from_slice(z);
        offset += p;
        for arm in active.iter() {
            let base = offset + arm.index() * p;
            for (slot, value) in out[base..base + p].iter_mut().zip(z) {
                *slot = *value;
            }
        }
    }

    fn check_records(&self, records: &[ParticipantRecord]) -> Result<()> {
        if records.is_empty() {
            return Err(Error::Empty("participant records"));
        }
        for rec in records {
            if rec.covariates.len() != self.n_covariates() {
                return Err(Error::Dimension {
                    context: "record covariates",
                    expected: self.n_covariates(),
                    actual: rec.covariates.len(),
                });
            }
        }
        Ok(())
    }

    pub fn stage1_matrix(&self, records: &[ParticipantRecord]) -> Result<Array2<f64>> {
        self.check_records(records)?;
        let mut x = Array2::zeros((records.len(), self.stage1_width()));
        for (i, rec) in records.iter().enumerate() {
            self.fill_stage1_row(
                &rec.covariates,
                rec.a1,
                x.row_mut(i).as_slice_mut().expect("contiguous row"),
            );
        }
        Ok(x)
    }

    pub fn stage2_matrix(&self, records: &[ParticipantRecord]) -> Result<Array2<f64>> {
        self.check_records(records)?;
        let mut x = Array2::zeros((records.len(), self.stage2_width()));
        for (i, rec) in records.iter().enumerate() {
            self.fill_stage2_row(
                &rec.covariates,
                rec.a2.active_set(rec.a1),
                x.row_mut(i).as_slice_mut().expect("contiguous row"),
            );
        }
        Ok(x)
    }
}
