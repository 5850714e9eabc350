//! Onset-risk modeling: train, calibrate, and evaluate the risk predictor on
//! never-treated patients.
//!
//! Training data is assembled under a leakage guard — a record qualifies only
//! if its patient has no treatment flag at or before the record's year, and
//! (for dynamic evaluation) only years strictly before the cutoff are seen.
//! Hyperparameters come from seeded random search over the learners' tuning
//! ranges, scored by stratified cross-validated log-loss with SMOTE applied
//! to training folds only; a Platt calibrator is fit on the winning trial's
//! out-of-fold scores.

mod platt;
mod search;
mod smote;

pub use platt::{fit_platt, PlattCalibrator};
pub use search::{
    cross_validate, default_hyperparams, draw_hyperparams, random_search, stratified_folds,
    CvOutcome, RiskHyperparams, RiskLearnerKind, SearchConfig, SmoteParams,
};
pub use smote::smote_oversample;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{columns, CohortError, Panel, PatientRecord};
use crate::learners::{FittedLearner, LearnerError};
use crate::linalg::{sigmoid, Matrix};
use crate::rng::derive_seed;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("minority class has {have} members, SMOTE needs at least {need}")]
    TooFewMinority { have: usize, need: usize },
    #[error("labels contain a single class")]
    SingleClassLabels,
    #[error("no labeled never-treated records available for training")]
    NoTrainingData,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

/// Which feature columns the risk model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureView {
    /// Every column in the panel layout.
    Full,
    /// Only the columns derivable from the Framingham charting score.
    FraminghamOnly,
    /// The Framingham columns plus age and HbA1c.
    FraminghamPlusAgeHba1c,
}

impl FeatureView {
    /// Resolve the view to column indices in a panel layout.
    pub fn indices(&self, layout: &crate::cohort::FeatureLayout) -> Result<Vec<usize>, CohortError> {
        match self {
            FeatureView::Full => Ok((0..layout.len()).collect()),
            FeatureView::FraminghamOnly => layout.indices_of(&columns::CHART_SCORE_COLUMNS),
            FeatureView::FraminghamPlusAgeHba1c => {
                let mut names: Vec<&str> = columns::CHART_SCORE_COLUMNS.to_vec();
                names.push(columns::AGE);
                names.push(columns::HBA1C);
                layout.indices_of(&names)
            }
        }
    }
}

/// Training configuration for [`train_risk_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTrainConfig {
    pub learner: RiskLearnerKind,
    pub feature_view: FeatureView,
    /// Use only records with `year < history_before`; `None` trains on the
    /// whole panel.
    pub history_before: Option<u32>,
    pub search: SearchConfig,
    /// Pin the hyperparameters instead of searching; the single CV pass
    /// still runs to fit the calibrator.
    pub fixed_params: Option<RiskHyperparams>,
}

impl RiskTrainConfig {
    pub fn new(learner: RiskLearnerKind) -> Self {
        Self {
            learner,
            feature_view: FeatureView::Full,
            history_before: None,
            search: SearchConfig::default(),
            fixed_params: None,
        }
    }
}

/// Calibrated onset-risk model over a feature view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    pub learner: FittedLearner,
    pub calibrator: PlattCalibrator,
    pub feature_view: FeatureView,
    /// Column indices (into the panel feature space) the learner consumes.
    pub feature_indices: Vec<usize>,
    /// Full panel feature dimension expected by [`predict_risk`].
    pub input_dim: usize,
    pub hyperparams: RiskHyperparams,
    /// Cross-validated Brier scores (raw, calibrated) from the winning trial.
    pub cv_brier: Option<(f64, f64)>,
}

impl RiskModel {
    /// Calibrated onset probability for a full panel feature vector.
    pub fn predict_risk(&self, features: &[f64]) -> Result<f64, RiskError> {
        if features.len() != self.input_dim {
            return Err(RiskError::Learner(LearnerError::DimensionMismatch {
                expected: self.input_dim,
                got: features.len(),
            }));
        }
        let x: Vec<f64> = self.feature_indices.iter().map(|&i| features[i]).collect();
        let raw = self.learner.predict_raw(&x)?;
        Ok(self.calibrator.calibrate(raw).clamp(0.0, 1.0))
    }
}

/// Records admissible for risk training: labeled, and from the patient's
/// never-treated era (no treatment flag at or before the record's year).
fn training_records<'p>(panel: &'p Panel, history_before: Option<u32>) -> Vec<&'p PatientRecord> {
    panel
        .records()
        .iter()
        .filter(|r| history_before.map_or(true, |cut| r.year < cut))
        .filter(|r| r.onset_next.is_some())
        .filter(|r| {
            let untouched =
                panel.first_treated_year(&r.patient_id).map_or(true, |t| t > r.year);
            debug_assert!(untouched || r.treated || panel.first_treated_year(&r.patient_id).unwrap() <= r.year);
            untouched && !r.treated
        })
        .collect()
}

/// Train the calibrated risk model on the panel's never-treated records.
pub fn train_risk_model(
    panel: &Panel,
    config: &RiskTrainConfig,
    seed: u64,
) -> Result<RiskModel, RiskError> {
    let feature_indices = config.feature_view.indices(panel.layout())?;
    let records = training_records(panel, config.history_before);
    if records.is_empty() {
        return Err(RiskError::NoTrainingData);
    }
    // Leakage guard: nothing in the assembled set may be from a treated era.
    for r in &records {
        assert!(
            !r.treated && panel.first_treated_year(&r.patient_id).map_or(true, |t| t > r.year),
            "leakage: treated-era record in risk training set"
        );
        if let Some(cut) = config.history_before {
            assert!(r.year < cut, "leakage: record at or after training cutoff");
        }
    }

    let x = Matrix::from_rows(
        &records.iter().map(|r| panel.feature_subset(r, &feature_indices)).collect::<Vec<_>>(),
    );
    let y: Vec<bool> = records.iter().map(|r| r.onset_next == Some(true)).collect();
    let n_pos = y.iter().filter(|&&v| v).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(RiskError::SingleClassLabels);
    }

    let min_class = n_pos.min(y.len() - n_pos);
    let (hyperparams, calibrator, cv_brier) = if min_class < 2 {
        // Too little signal to cross-validate; fall back to log-odds.
        (default_hyperparams(config.learner), PlattCalibrator::identity(), None)
    } else {
        let (params, outcome) = match &config.fixed_params {
            Some(p) => {
                let folds = crate::risk::search::stratified_folds(
                    &y,
                    config.search.n_folds.min(min_class).max(2),
                    derive_seed(derive_seed(seed, 1), u64::MAX),
                );
                let n_folds = config.search.n_folds.min(min_class).max(2);
                let outcome = crate::risk::search::cross_validate(
                    &x,
                    &y,
                    p,
                    &folds,
                    n_folds,
                    config.search.smote.as_ref(),
                    derive_seed(seed, 1),
                )?;
                (p.clone(), outcome)
            }
            None => random_search(&x, &y, config.learner, &config.search, derive_seed(seed, 1))?,
        };
        let calibrator = fit_platt(&outcome.oof_raw, &y)?;
        let mut brier_raw = 0.0;
        let mut brier_cal = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            let target = if yi { 1.0 } else { 0.0 };
            brier_raw += (sigmoid(outcome.oof_raw[i]) - target).powi(2);
            brier_cal += (calibrator.calibrate(outcome.oof_raw[i]) - target).powi(2);
        }
        let n = y.len() as f64;
        (params, calibrator, Some((brier_raw / n, brier_cal / n)))
    };

    // Final fit on the full training set, oversampled like the folds were.
    let (x_fit, y_fit) = match (&config.search.smote, min_class >= 2) {
        (Some(s), true) => {
            let k = s.k_neighbors.min(min_class - 1).max(1);
            smote_oversample(&x, &y, k, s.target_ratio, derive_seed(seed, 2))?
        }
        _ => (x, y),
    };
    let learner = search::fit_with_params(&x_fit, &y_fit, &hyperparams, derive_seed(seed, 3))?;

    Ok(RiskModel {
        learner,
        calibrator,
        feature_view: config.feature_view,
        input_dim: panel.n_features(),
        feature_indices,
        hyperparams,
        cv_brier,
    })
}

/// One calibration-curve bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_predicted: f64,
    pub observed_rate: f64,
    pub count: usize,
}

/// Equal-width probability bins over [0, 1]; empty bins are omitted.
pub fn calibration_curve(predicted: &[f64], labels: &[bool], n_bins: usize) -> Vec<CalibrationBin> {
    assert!(n_bins >= 2, "need at least two bins");
    assert_eq!(predicted.len(), labels.len());
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); n_bins];
    for (&p, &y) in predicted.iter().zip(labels) {
        let bin = ((p * n_bins as f64) as usize).min(n_bins - 1);
        sums[bin].0 += p;
        sums[bin].1 += if y { 1.0 } else { 0.0 };
        sums[bin].2 += 1;
    }
    sums.into_iter()
        .filter(|(_, _, c)| *c > 0)
        .map(|(ps, ys, c)| CalibrationBin {
            mean_predicted: ps / c as f64,
            observed_rate: ys / c as f64,
            count: c,
        })
        .collect()
}
