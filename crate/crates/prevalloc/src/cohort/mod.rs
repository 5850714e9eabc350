//! Longitudinal patient panels: records, feature layouts, censoring rules,
//! label construction, and synthetic cohort generation.
//!
//! A [`Panel`] is an immutable set of per-patient-per-year records. Year
//! indices start at 1. Three censoring states are distinguished:
//!
//! * **death** — a record with `died = true` in year `l` admits no records in
//!   later years, and the patient stops being a treatment target;
//! * **missed follow-up** — the onset label for a year is absent; the patient
//!   stays in the panel and remains a valid treatment target;
//! * **onset** — once a transition to the disease is observed the patient
//!   leaves the at-risk pool (prevention is moot for them).

mod csv_io;
mod generate;

pub use csv_io::{load_panel, save_panel};
pub use generate::{
    generate_synthetic_cohort, BinaryFeatureSpec, EffectHeterogeneity, GenConfig, NoiseGroupSpec,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::LinalgError;

/// Fasting glucose (mmol/L) above which a patient counts as having
/// transitioned to the disease; the prediabetic band is (6.1, 6.9].
pub const ONSET_GLUCOSE_MMOL_L: f64 = 6.9;
/// Lower edge of the prediabetic fasting-glucose band (mmol/L).
pub const PREDIABETIC_GLUCOSE_MMOL_L: f64 = 6.1;

/// Well-known feature-column names used by feature views, the clinical
/// baseline, and the economic model.
pub mod columns {
    pub const AGE: &str = "age";
    pub const SEX: &str = "sex";
    pub const HEIGHT: &str = "height";
    pub const WEIGHT: &str = "weight";
    pub const BMI: &str = "bmi";
    pub const SYSTOLIC_BP: &str = "systolic_bp";
    pub const DIASTOLIC_BP: &str = "diastolic_bp";
    pub const HDL: &str = "hdl";
    pub const TRIGLYCERIDES: &str = "triglycerides";
    pub const HBA1C: &str = "hba1c";
    pub const PARENTAL_HISTORY: &str = "parental_history";
    pub const ON_BP_TREATMENT: &str = "on_bp_treatment";
    pub const FASTING_GLUCOSE: &str = "fasting_glucose";

    /// Columns derivable from the clinical charting score; the sparse "score
    /// inputs only" feature view selects exactly these.
    pub const CHART_SCORE_COLUMNS: [&str; 9] = [
        FASTING_GLUCOSE,
        BMI,
        HDL,
        SEX,
        PARENTAL_HISTORY,
        TRIGLYCERIDES,
        SYSTOLIC_BP,
        DIASTOLIC_BP,
        ON_BP_TREATMENT,
    ];

    /// Disease-code indicator columns for the five costed comorbid
    /// conditions, in cost order C1..C5.
    pub const COMORBIDITY_COLUMNS: [&str; 5] = [
        "dx_acute_mi",
        "dx_intracerebral_hemorrhage",
        "dx_hypothyroidism",
        "dx_angina",
        "dx_heart_failure",
    ];
}

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("duplicate record key ({patient}, year {year})")]
    DuplicateKey { patient: String, year: u32 },
    #[error("record for ({patient}, year {year}) has {got} features, panel has {expected}")]
    FeatureDimMismatch { patient: String, year: u32, got: usize, expected: usize },
    #[error("invalid year {year} for patient {patient}: years start at 1")]
    InvalidYear { patient: String, year: u32 },
    #[error("patient {patient} died in year {death_year} but has a record in year {year}")]
    RecordAfterDeath { patient: String, death_year: u32, year: u32 },
    #[error("year {year} outside panel range 1..={horizon}")]
    YearOutOfRange { year: u32, horizon: u32 },
    #[error("duplicate feature name `{0}` in layout")]
    DuplicateFeatureName(String),
    #[error("layout has no column named `{0}`")]
    MissingColumn(String),
    #[error("generator config invalid: {0}")]
    InvalidConfig(String),
    #[error("covariance matrix rejected: {0}")]
    Covariance(#[from] LinalgError),
    #[error("csv parse error at data row {row}, column `{column}`: {message}")]
    CsvParse { row: usize, column: String, message: String },
    #[error("csv file has {got} feature columns, expected {expected}")]
    CsvWidth { got: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Opaque patient identifier. Ordering is lexicographic and only used to fix
/// deterministic iteration orders, never as a tie-break preference.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatientId(pub String);

impl PatientId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for PatientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PatientId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// One patient-year observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: PatientId,
    /// Period index, starting at 1.
    pub year: u32,
    /// Dense feature vector; dimension is fixed across a panel.
    pub features: Vec<f64>,
    /// Whether the patient is on preventive treatment in this year.
    pub treated: bool,
    /// Outcome label for the *following* year; `None` when the follow-up was
    /// missed.
    pub onset_next: Option<bool>,
    pub died: bool,
    /// Fasting glucose in mmol/L for this year's observation.
    pub fasting_glucose: f64,
}

/// Names for the feature columns of a panel. Doubles as the column mapping
/// ("schema") when ingesting CSV files whose header only carries positional
/// `f0..f{n-1}` names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureLayout {
    names: Vec<String>,
}

impl FeatureLayout {
    pub fn new(names: Vec<String>) -> Result<Self, CohortError> {
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(CohortError::DuplicateFeatureName(n.clone()));
            }
        }
        Ok(Self { names })
    }

    /// Positional layout `f0..f{n-1}` for panels without named columns.
    pub fn generic(n: usize) -> Self {
        Self { names: (0..n).map(|i| format!("f{i}")).collect() }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize, CohortError> {
        self.index_of(name).ok_or_else(|| CohortError::MissingColumn(name.to_string()))
    }

    /// Indices for a list of named columns, failing on the first missing one.
    pub fn indices_of(&self, names: &[&str]) -> Result<Vec<usize>, CohortError> {
        names.iter().map(|n| self.require(n)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct PatientSummary {
    death_year: Option<u32>,
    first_treated_year: Option<u32>,
    /// Year in which the transition became visible (label year + 1).
    onset_observed_year: Option<u32>,
}

/// Immutable longitudinal panel keyed by `(patient_id, year)`.
///
/// Records are held sorted by key; all read paths iterate in that order, so
/// downstream computations are deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    records: Vec<PatientRecord>,
    layout: FeatureLayout,
    horizon: u32,
    #[serde(skip)]
    summaries: BTreeMap<PatientId, PatientSummary>,
}

impl Panel {
    pub fn new(mut records: Vec<PatientRecord>, layout: FeatureLayout) -> Result<Self, CohortError> {
        records.sort_by(|a, b| (&a.patient_id, a.year).cmp(&(&b.patient_id, b.year)));
        let n_features = layout.len();
        let mut horizon = 0;
        for w in records.windows(2) {
            if w[0].patient_id == w[1].patient_id && w[0].year == w[1].year {
                return Err(CohortError::DuplicateKey {
                    patient: w[0].patient_id.to_string(),
                    year: w[0].year,
                });
            }
        }
        for r in &records {
            if r.year < 1 {
                return Err(CohortError::InvalidYear { patient: r.patient_id.to_string(), year: r.year });
            }
            if r.features.len() != n_features {
                return Err(CohortError::FeatureDimMismatch {
                    patient: r.patient_id.to_string(),
                    year: r.year,
                    got: r.features.len(),
                    expected: n_features,
                });
            }
            horizon = horizon.max(r.year);
        }
        let summaries = Self::build_summaries(&records)?;
        Ok(Self { records, layout, horizon, summaries })
    }

    fn build_summaries(records: &[PatientRecord]) -> Result<BTreeMap<PatientId, PatientSummary>, CohortError> {
        let mut summaries: BTreeMap<PatientId, PatientSummary> = BTreeMap::new();
        for r in records {
            let s = summaries.entry(r.patient_id.clone()).or_default();
            if let Some(d) = s.death_year {
                if r.year > d {
                    return Err(CohortError::RecordAfterDeath {
                        patient: r.patient_id.to_string(),
                        death_year: d,
                        year: r.year,
                    });
                }
            }
            if r.died {
                s.death_year = Some(s.death_year.map_or(r.year, |d| d.min(r.year)));
            }
            if r.treated {
                s.first_treated_year = Some(s.first_treated_year.map_or(r.year, |t| t.min(r.year)));
            }
            if r.onset_next == Some(true) {
                let observed = r.year + 1;
                s.onset_observed_year = Some(s.onset_observed_year.map_or(observed, |o| o.min(observed)));
            }
        }
        Ok(summaries)
    }

    /// Restore derived state after deserialization.
    pub fn rebuild_index(&mut self) -> Result<(), CohortError> {
        self.summaries = Self::build_summaries(&self.records)?;
        Ok(())
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn n_features(&self) -> usize {
        self.layout.len()
    }

    /// Largest year present; 0 for an empty panel.
    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn n_patients(&self) -> usize {
        self.summaries.len()
    }

    /// Number of patients ever flagged treated in the data (the already
    /// enrolled part of the cohort).
    pub fn treated_count(&self) -> usize {
        self.summaries.values().filter(|s| s.first_treated_year.is_some()).count()
    }

    pub fn patient_ids(&self) -> impl Iterator<Item = &PatientId> {
        self.summaries.keys()
    }

    pub fn record(&self, id: &PatientId, year: u32) -> Option<&PatientRecord> {
        self.records
            .binary_search_by(|r| (&r.patient_id, r.year).cmp(&(id, year)))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn records_in_year(&self, year: u32) -> impl Iterator<Item = &PatientRecord> {
        self.records.iter().filter(move |r| r.year == year)
    }

    pub fn records_before_year(&self, year: u32) -> impl Iterator<Item = &PatientRecord> {
        self.records.iter().filter(move |r| r.year < year)
    }

    pub fn death_year(&self, id: &PatientId) -> Option<u32> {
        self.summaries.get(id).and_then(|s| s.death_year)
    }

    /// First year the *data* flags the patient as treated.
    pub fn first_treated_year(&self, id: &PatientId) -> Option<u32> {
        self.summaries.get(id).and_then(|s| s.first_treated_year)
    }

    /// Year in which a recorded transition became visible, if any.
    pub fn onset_observed_year(&self, id: &PatientId) -> Option<u32> {
        self.summaries.get(id).and_then(|s| s.onset_observed_year)
    }

    /// Patients who may be newly enrolled in preventive treatment in `year`:
    /// alive, not flagged treated in the data at or before `year`, and with
    /// no transition observed yet. Patients with missed follow-ups are
    /// retained — an absent label never removes a patient from the pool.
    pub fn eligible_patients(&self, year: u32) -> Result<BTreeSet<PatientId>, CohortError> {
        if self.records.is_empty() {
            return Ok(BTreeSet::new());
        }
        if year < 1 || year > self.horizon {
            return Err(CohortError::YearOutOfRange { year, horizon: self.horizon });
        }
        Ok(self
            .summaries
            .iter()
            .filter(|(_, s)| {
                s.death_year.map_or(true, |d| d >= year)
                    && s.first_treated_year.map_or(true, |t| t > year)
                    && s.onset_observed_year.map_or(true, |o| o > year)
            })
            .map(|(id, _)| id.clone())
            .collect())
    }

    /// Derive onset labels from next-year fasting glucose: the label for year
    /// `l` is 1 iff the year `l+1` glucose exceeds [`ONSET_GLUCOSE_MMOL_L`].
    /// Records without a year `l+1` observation get an absent label. The
    /// operation is idempotent.
    pub fn label_transition(&self) -> Result<Panel, CohortError> {
        let mut records = self.records.clone();
        let glucose_next: Vec<Option<f64>> = records
            .iter()
            .map(|r| self.record(&r.patient_id, r.year + 1).map(|n| n.fasting_glucose))
            .collect();
        for (r, g) in records.iter_mut().zip(glucose_next) {
            r.onset_next = g.map(|g| g > ONSET_GLUCOSE_MMOL_L);
        }
        Panel::new(records, self.layout.clone())
    }

    /// Column-subset view of a record's features.
    pub fn feature_subset(&self, record: &PatientRecord, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| record.features[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, year: u32, features: Vec<f64>) -> PatientRecord {
        PatientRecord {
            patient_id: PatientId::from(id),
            year,
            features,
            treated: false,
            onset_next: None,
            died: false,
            fasting_glucose: 6.5,
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let layout = FeatureLayout::generic(1);
        let records = vec![rec("a", 1, vec![0.0]), rec("a", 1, vec![1.0])];
        assert!(matches!(
            Panel::new(records, layout),
            Err(CohortError::DuplicateKey { .. })
        ));
    }

    #[test]
    fn feature_dim_enforced() {
        let layout = FeatureLayout::generic(2);
        let records = vec![rec("a", 1, vec![0.0])];
        assert!(matches!(
            Panel::new(records, layout),
            Err(CohortError::FeatureDimMismatch { .. })
        ));
    }

    #[test]
    fn record_after_death_rejected() {
        let layout = FeatureLayout::generic(1);
        let mut dying = rec("a", 1, vec![0.0]);
        dying.died = true;
        let records = vec![dying, rec("a", 2, vec![0.0])];
        assert!(matches!(
            Panel::new(records, layout),
            Err(CohortError::RecordAfterDeath { .. })
        ));
    }

    #[test]
    fn horizon_is_max_year() {
        let layout = FeatureLayout::generic(1);
        let panel =
            Panel::new(vec![rec("a", 1, vec![0.0]), rec("b", 4, vec![0.0])], layout).unwrap();
        assert_eq!(panel.horizon(), 4);
    }

    #[test]
    fn eligibility_excludes_dead_keeps_missed_followup() {
        let layout = FeatureLayout::generic(1);
        let mut died_y2 = rec("dead", 2, vec![0.0]);
        died_y2.died = true;
        let mut missed = rec("missed", 2, vec![0.0]);
        missed.onset_next = None;
        let records = vec![
            rec("dead", 1, vec![0.0]),
            died_y2,
            rec("missed", 1, vec![0.0]),
            missed,
            rec("other", 3, vec![0.0]),
        ];
        let panel = Panel::new(records, layout).unwrap();
        let eligible = panel.eligible_patients(3).unwrap();
        assert!(!eligible.contains(&PatientId::from("dead")));
        assert!(eligible.contains(&PatientId::from("missed")));
        assert!(eligible.contains(&PatientId::from("other")));
    }

    #[test]
    fn eligibility_excludes_previously_treated_and_onset() {
        let layout = FeatureLayout::generic(1);
        let mut treated = rec("treated", 1, vec![0.0]);
        treated.treated = true;
        let mut onset = rec("onset", 1, vec![0.0]);
        onset.onset_next = Some(true);
        let records = vec![treated, onset, rec("fresh", 1, vec![0.0]), rec("fresh", 2, vec![0.0])];
        let panel = Panel::new(records, layout).unwrap();
        let eligible = panel.eligible_patients(2).unwrap();
        assert_eq!(
            eligible.into_iter().collect::<Vec<_>>(),
            vec![PatientId::from("fresh")]
        );
    }

    #[test]
    fn eligibility_empty_panel_is_empty() {
        let panel = Panel::new(vec![], FeatureLayout::generic(0)).unwrap();
        assert!(panel.eligible_patients(1).unwrap().is_empty());
    }

    #[test]
    fn eligibility_rejects_out_of_range_year() {
        let layout = FeatureLayout::generic(1);
        let panel = Panel::new(vec![rec("a", 1, vec![0.0])], layout).unwrap();
        assert!(matches!(
            panel.eligible_patients(2),
            Err(CohortError::YearOutOfRange { .. })
        ));
    }

    #[test]
    fn label_transition_thresholds_and_censors() {
        let layout = FeatureLayout::generic(1);
        let mut r1 = rec("a", 1, vec![0.0]);
        r1.fasting_glucose = 6.5;
        let mut r2 = rec("a", 2, vec![0.0]);
        r2.fasting_glucose = 7.2;
        let mut b1 = rec("b", 1, vec![0.0]);
        b1.fasting_glucose = 6.5;
        let mut b2 = rec("b", 2, vec![0.0]);
        b2.fasting_glucose = 6.5;
        let mut c1 = rec("c", 1, vec![0.0]);
        c1.fasting_glucose = 6.5;
        let panel = Panel::new(vec![r1, r2, b1, b2, c1], layout).unwrap();
        let labeled = panel.label_transition().unwrap();
        assert_eq!(labeled.record(&"a".into(), 1).unwrap().onset_next, Some(true));
        assert_eq!(labeled.record(&"b".into(), 1).unwrap().onset_next, Some(false));
        assert_eq!(labeled.record(&"c".into(), 1).unwrap().onset_next, None);
        // boundary: exactly 6.9 is still prediabetic
        assert!(!(6.9f64 > ONSET_GLUCOSE_MMOL_L));
    }

    #[test]
    fn label_transition_is_idempotent() {
        let layout = FeatureLayout::generic(1);
        let mut r1 = rec("a", 1, vec![0.0]);
        r1.fasting_glucose = 6.3;
        let mut r2 = rec("a", 2, vec![0.0]);
        r2.fasting_glucose = 7.5;
        let panel = Panel::new(vec![r1, r2], layout).unwrap();
        let once = panel.label_transition().unwrap();
        let twice = once.label_transition().unwrap();
        assert_eq!(once.records(), twice.records());
    }

    #[test]
    fn layout_rejects_duplicate_names() {
        assert!(matches!(
            FeatureLayout::new(vec!["a".into(), "a".into()]),
            Err(CohortError::DuplicateFeatureName(_))
        ));
    }
}
