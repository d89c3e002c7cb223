//! Statistical machinery for designing a two-stage, four-arm trial with
//! response-guided second-stage treatment: covariate-adaptive minimization
//! randomization with treatment exclusions, synthetic trial generation,
//! treatment-regime estimation by penalized backward induction, and the two
//! design simulations (sample-size/power and randomization imbalance).
//!
//! Replicate-level simulation is data parallel. The default `parallel`
//! feature runs replicates on a rayon pool; disabling it falls back to a
//! sequential loop with identical results, since every replicate owns a
//! counter-derived RNG stream.

pub mod datagen;
pub mod design;
pub mod dtr;
pub mod error;
pub mod imbalance;
pub mod io;
pub mod lasso;
pub mod model;
pub mod power;
pub mod randomizer;
pub mod runner;

pub use error::{Error, Result};
pub use model::{
    classify_responder, feasible_stage2, unrestricted_stage2, Arm, ArmSet,
    ParticipantRecord, ResponderCategory, Stage2Action, TreatmentPolicy,
};
pub use runner::Parallelism;
