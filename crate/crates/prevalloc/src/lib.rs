//! Budget-constrained allocation of preventive care.
//!
//! `prevalloc` implements a three-stage decision model for enrolling patients
//! into preventive treatment under an annual budget of `k` enrollments:
//!
//! 1. **Effect estimation** ([`effect`]) — heterogeneous treatment effects
//!    from observational panels via an honest causal forest, or a known
//!    (optionally decaying) effect supplied up front.
//! 2. **Risk modeling** ([`risk`]) — calibrated onset-risk prediction on
//!    never-treated patients, with SMOTE rebalancing, Platt scaling and
//!    cross-validated hyperparameter search over self-contained learners
//!    ([`learners`]).
//! 3. **Allocation** ([`policy`]) — the expected-onset-minimizing top-k rule
//!    (rank by risk reduction `γ·h`), plus clinical and naive baselines.
//!
//! The [`simulation`] harness evaluates policies year by year on longitudinal
//! panels ([`cohort`]), accounting prevented onsets and cost savings
//! ([`econ`]) with bootstrap spread, and [`sensitivity`] bundles robustness
//! studies (effect noise, training-size convergence, omitted-variable-bias
//! bounds, feature importance).
//!
//! Everything is deterministic given the seeds carried in the configs; the
//! `prevalloc` binary exposes the same functionality from the command line.

pub mod cohort;
pub mod config;
pub mod econ;
pub mod effect;
pub mod learners;
pub mod linalg;
pub mod policy;
pub mod risk;
pub mod rng;
pub mod sensitivity;
pub mod simulation;

/// Version tag written into every serialized model and config document.
pub const SCHEMA_VERSION: u32 = 1;
