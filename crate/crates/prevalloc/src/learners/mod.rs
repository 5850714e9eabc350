//! Self-contained supervised learners: CART trees, gradient-boosted trees,
//! random forests, and L1/L2 logistic models, with versioned JSON
//! persistence.

pub mod forest;
pub mod gbdt;
pub mod linear;
pub mod tree;

pub use forest::{fit_random_forest, ForestParams, RandomForestModel};
pub use gbdt::{fit_gbdt, GbdtModel, GbdtParams};
pub use linear::{fit_linear, fit_ridge_regression, ridge_closed_form, LinearModel, Penalty};
pub use tree::{FeatureSubsample, SplitCriterion, Tree};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("labels are all identical; fit a prior-only model instead")]
    DegenerateLabels,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no training data")]
    EmptyData,
    #[error("inputs contain non-finite values")]
    NonFinite,
    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("model schema version {got} unsupported (expected {expected})")]
    SchemaVersion { got: u32, expected: u32 },
    #[error("model i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("model serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Loss reweighting mode for imbalanced labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeight {
    None,
    /// Inverse class frequency, normalized so weights sum to `n`.
    Balanced,
}

/// Per-row weights for the chosen class-weight mode.
pub(crate) fn class_weights(y: &[bool], mode: ClassWeight) -> Vec<f64> {
    match mode {
        ClassWeight::None => vec![1.0; y.len()],
        ClassWeight::Balanced => {
            let n = y.len() as f64;
            let n_pos = y.iter().filter(|&&v| v).count() as f64;
            let n_neg = n - n_pos;
            let (wp, wn) = (n / (2.0 * n_pos.max(1.0)), n / (2.0 * n_neg.max(1.0)));
            y.iter().map(|&v| if v { wp } else { wn }).collect()
        }
    }
}

/// Any fitted classifier, unified behind raw-score and probability
/// prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedLearner {
    Gbdt(GbdtModel),
    RandomForest(RandomForestModel),
    Linear(LinearModel),
}

impl FittedLearner {
    pub fn n_features(&self) -> usize {
        match self {
            FittedLearner::Gbdt(m) => m.n_features,
            FittedLearner::RandomForest(m) => m.n_features,
            FittedLearner::Linear(m) => m.weights.len(),
        }
    }

    /// Uncalibrated score on the log-odds scale.
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64, LearnerError> {
        match self {
            FittedLearner::Gbdt(m) => m.predict_raw(x),
            FittedLearner::RandomForest(m) => Ok(crate::linalg::logit(m.predict_proba(x)?)),
            FittedLearner::Linear(m) => m.predict_raw(x),
        }
    }
}

/// Probability of the positive class, strictly inside (0, 1).
pub fn predict_proba(model: &FittedLearner, x: &[f64]) -> Result<f64, LearnerError> {
    match model {
        FittedLearner::Gbdt(m) => m.predict_proba(x),
        FittedLearner::RandomForest(m) => m.predict_proba(x),
        FittedLearner::Linear(m) => m.predict_proba(x),
    }
}

/// Versioned on-disk model document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VersionedModel {
    pub schema_version: u32,
    pub model: FittedLearner,
}

pub fn save_model(model: &FittedLearner, path: &Path) -> Result<(), LearnerError> {
    let doc = VersionedModel { schema_version: crate::SCHEMA_VERSION, model: model.clone() };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FittedLearner, LearnerError> {
    let doc: VersionedModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.schema_version != crate::SCHEMA_VERSION {
        return Err(LearnerError::SchemaVersion {
            got: doc.schema_version,
            expected: crate::SCHEMA_VERSION,
        });
    }
    Ok(doc.model)
}
