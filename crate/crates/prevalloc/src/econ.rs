//! Economic model: per-patient costs, prevented onsets, cost savings with
//! lifetime extension, bootstrap spread, and population extrapolation.
//!
//! Cost conventions: prevention costs `c_prevent` per treated patient-year;
//! after an onset the annual disease cost is an age-dependent base
//! `cap / (1 + e^(-age/10))` plus a charge per comorbid condition. Disease
//! costs run beyond the study horizon for `clamp(life_expectancy − age,
//! min_extra_years, max_extra_years)` years. Prevention is charged for every
//! treated year inside the horizon.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::PatientId;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum EconError {
    #[error("age must be non-negative, got {0}")]
    NegativeAge(f64),
    #[error("simulation result covers zero years")]
    EmptyHorizon,
    #[error("simulation result has no records")]
    EmptyResult,
    #[error("bootstrap needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("result i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("result serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// The five costed comorbid conditions, in cost order C1..C5.
pub const N_COMORBIDITIES: usize = 5;

/// Economic constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    /// Annual preventive-treatment cost per patient.
    pub c_prevent: f64,
    /// Cap of the age-dependent base cost sigmoid.
    pub base_cost_cap: f64,
    /// Annual cost per comorbid condition: acute myocardial infarction,
    /// intracerebral hemorrhage, acquired hypothyroidism, angina pectoris,
    /// heart failure.
    pub comorbidity_costs: [f64; N_COMORBIDITIES],
    pub life_expectancy: f64,
    pub min_extra_years: f64,
    pub max_extra_years: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            c_prevent: 1380.0,
            base_cost_cap: 15_000.0,
            comorbidity_costs: [5_000.0, 5_000.0, 5_000.0, 15_000.0, 15_000.0],
            life_expectancy: 75.0,
            min_extra_years: 3.0,
            max_extra_years: 10.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<(), EconError> {
        assert!(self.min_extra_years <= self.max_extra_years, "extra-year clamp inverted");
        Ok(())
    }

    /// Years of disease cost accrued by a patient of this age:
    /// `clamp(life_expectancy − age, min_extra_years, max_extra_years)`.
    pub fn remaining_years(&self, age: f64) -> f64 {
        (self.life_expectancy - age).clamp(self.min_extra_years, self.max_extra_years)
    }
}

/// Age-dependent annual base cost `cap / (1 + e^(-age/10))`; strictly
/// increasing in age, below the cap.
pub fn base_cost(age: f64, params: &CostParams) -> Result<f64, EconError> {
    if age < 0.0 {
        return Err(EconError::NegativeAge(age));
    }
    Ok(params.base_cost_cap / (1.0 + (-age / 10.0).exp()))
}

/// Annual disease cost: base cost plus flagged comorbidity charges.
pub fn diabetes_cost(
    age: f64,
    comorbidities: &[bool; N_COMORBIDITIES],
    params: &CostParams,
) -> Result<f64, EconError> {
    let mut cost = base_cost(age, params)?;
    for (flag, charge) in comorbidities.iter().zip(params.comorbidity_costs) {
        if *flag {
            cost += charge;
        }
    }
    Ok(cost)
}

/// Expected annual cost of a treated patient: `y (1−γ) C_diab + C_prevent`.
pub fn expected_cost_treated(y: f64, gamma: f64, c_diab: f64, params: &CostParams) -> f64 {
    y * (1.0 - gamma) * c_diab + params.c_prevent
}

/// Expected annual cost of an untreated patient: `y C_diab`.
pub fn expected_cost_untreated(y: f64, c_diab: f64) -> f64 {
    y * c_diab
}

/// One evaluated patient-year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientYearOutcome {
    pub patient_id: PatientId,
    pub year: u32,
    pub treated: bool,
    /// Outcome label for the following year; `None` when censored.
    pub onset_next: Option<bool>,
    /// Treatment effect applied in this year (0 for untreated rows).
    pub gamma: f64,
    pub age: f64,
    pub comorbidities: [bool; N_COMORBIDITIES],
}

/// Evaluated scenario: per-year outcomes plus reproducible aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub records: Vec<PatientYearOutcome>,
    /// Number of allocation years the run covered (the `L` that prevented
    /// onsets are averaged over).
    pub n_years: usize,
}

impl SimulationResult {
    pub fn new(records: Vec<PatientYearOutcome>, n_years: usize) -> Self {
        Self { records, n_years }
    }

    fn patient_groups(&self) -> BTreeMap<&PatientId, Vec<usize>> {
        let mut groups: BTreeMap<&PatientId, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups.entry(&r.patient_id).or_default().push(i);
        }
        groups
    }

    /// CSV export of the per-year records.
    pub fn save_csv(&self, path: &Path) -> Result<(), EconError> {
        let mut out = String::from(
            "patient_id,year,treated,onset_next,gamma,age,\
             dx_acute_mi,dx_intracerebral_hemorrhage,dx_hypothyroidism,dx_angina,dx_heart_failure\n",
        );
        for r in &self.records {
            let onset = match r.onset_next {
                None => String::new(),
                Some(true) => "1".into(),
                Some(false) => "0".into(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.patient_id,
                r.year,
                r.treated as u8,
                onset,
                r.gamma,
                r.age,
                r.comorbidities[0] as u8,
                r.comorbidities[1] as u8,
                r.comorbidities[2] as u8,
                r.comorbidities[3] as u8,
                r.comorbidities[4] as u8,
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Expected prevented onsets: `(1/L) Σ_l Σ_i γ t y`; censored labels
/// contribute nothing.
pub fn prevented_onsets(result: &SimulationResult) -> Result<f64, EconError> {
    if result.n_years == 0 {
        return Err(EconError::EmptyHorizon);
    }
    let sum: f64 = result
        .records
        .iter()
        .filter(|r| r.treated && r.onset_next == Some(true))
        .map(|r| r.gamma)
        .sum();
    Ok(sum / result.n_years as f64)
}

/// Cost savings of the allocation against no preventive care: for every
/// treated patient-year, the avoided disease cost `y γ C_diab` (scaled by
/// the remaining-lifetime multiplier) minus the prevention spend. Untreated
/// rows cancel between the two arms.
pub fn cost_savings(result: &SimulationResult, params: &CostParams) -> Result<f64, EconError> {
    let mut savings = 0.0;
    for r in result.records.iter().filter(|r| r.treated) {
        let y = if r.onset_next == Some(true) { 1.0 } else { 0.0 };
        if y > 0.0 {
            let c_diab = diabetes_cost(r.age, &r.comorbidities, params)?;
            savings += y * r.gamma * c_diab * params.remaining_years(r.age);
        }
        savings -= params.c_prevent;
    }
    Ok(savings)
}

/// Patient-level bootstrap: resample patients (not records) with
/// replacement, evaluate the metric per replicate, report mean and standard
/// deviation. Deterministic under the seed; replicates are reduced in order.
pub fn bootstrap<F>(
    result: &SimulationResult,
    metric: F,
    n_replicates: usize,
    seed: u64,
) -> Result<(f64, f64), EconError>
where
    F: Fn(&SimulationResult) -> Result<f64, EconError>,
{
    if n_replicates < 2 {
        return Err(EconError::TooFewReplicates(n_replicates));
    }
    if result.records.is_empty() {
        return Err(EconError::EmptyResult);
    }
    let groups: Vec<Vec<usize>> = self::SimulationResult::patient_groups(result)
        .into_values()
        .collect();
    let n_patients = groups.len();
    let mut values = Vec::with_capacity(n_replicates);
    for rep in 0..n_replicates {
        let mut rng = rng_from_seed(derive_seed(seed, rep as u64));
        let mut records = Vec::with_capacity(result.records.len());
        for _ in 0..n_patients {
            let g = &groups[rng.gen_range(0..n_patients)];
            records.extend(g.iter().map(|&i| result.records[i].clone()));
        }
        let replicate = SimulationResult::new(records, result.n_years);
        values.push(metric(&replicate)?);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() as f64 - 1.0);
    Ok((mean, var.sqrt()))
}

/// Scale a per-patient annual figure to a population: plain product.
pub fn extrapolate_population(per_patient_annual: f64, population: u64) -> f64 {
    per_patient_annual * population as f64
}
