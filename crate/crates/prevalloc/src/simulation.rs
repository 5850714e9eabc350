//! Dynamic multi-year evaluation harness.
//!
//! Each allocation year `l` proceeds in five steps: (1) assemble training
//! data strictly from years before `l`; (2) refresh the risk and effect
//! models; (3) compute eligibility (alive, no observed transition, never
//! treated — in the data or by this run); (4) apply the policy under the
//! budget; (5) account outcomes and costs, carrying treatment forward (once
//! enrolled, a patient stays enrolled while in the panel).
//!
//! Modeling conventions: the effect forest is fit on the panel's recorded
//! treatment flags only — outcomes of patients this run enrolls stay as
//! recorded, and the evaluation weights them by the estimated effect
//! (expected-outcome accounting). Risk training additionally masks records
//! of run-enrolled patients from their enrollment year on, matching what an
//! operator would have been able to observe. Patients already treated in the
//! data provide effect-estimation signal but are outside the allocation
//! population and its metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{
    columns, generate_synthetic_cohort, load_panel, CohortError, FeatureLayout, GenConfig, Panel,
    PatientId,
};
use crate::econ::{
    bootstrap, cost_savings, prevented_onsets, CostParams, EconError, PatientYearOutcome,
    SimulationResult, N_COMORBIDITIES,
};
use crate::effect::{
    effect_at, fit_causal_forest_history, CausalForest, CausalForestParams, EffectError,
    EffectMode, EffectSpec,
};
use crate::policy::{
    framingham_score, random_policy, risk_only_policy, select_topk, threshold_policy,
    FraminghamInputs, PolicyError, Selection,
};
use crate::risk::{
    FeatureView, RiskError, RiskLearnerKind, RiskModel, RiskTrainConfig, SearchConfig,
};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("allocation starts in year {start} but needs {warmup} year(s) of history; begin no earlier than year {min_start}")]
    InsufficientHistory { start: u32, warmup: u32, min_start: u32 },
    #[error("years {start}..={end} outside panel horizon 1..={horizon}")]
    YearsOutOfRange { start: u32, end: u32, horizon: u32 },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Effect(#[from] EffectError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Econ(#[from] EconError),
    #[error("output i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("output serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where the panel comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelSource {
    Synthetic(GenConfig),
    Csv {
        path: PathBuf,
        /// Names for the positional feature columns; omitted = generic.
        #[serde(default)]
        layout: Option<Vec<String>>,
    },
}

impl PanelSource {
    pub fn load(&self) -> Result<Panel, CohortError> {
        match self {
            PanelSource::Synthetic(cfg) => generate_synthetic_cohort(cfg),
            PanelSource::Csv { path, layout } => {
                let schema = layout.clone().map(FeatureLayout::new).transpose()?;
                load_panel(path, schema)
            }
        }
    }
}

/// Allocation policy variants, including the model-specification ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Risk-reduction ranking `γ·h` (the decision model).
    Ours,
    /// Framingham charting score with top-k threshold.
    ClinicalFramingham,
    /// Uniform random enrollment.
    NaiveRandom,
    /// Top-k by onset risk alone.
    RiskOnly,
    /// Decision model on the Framingham input columns only.
    SparseI,
    /// Decision model on Framingham inputs plus age and HbA1c.
    SparseII,
    /// Decision model with a lasso risk learner.
    Linear,
}

impl PolicyKind {
    pub const ABLATION_SET: [PolicyKind; 5] = [
        PolicyKind::Ours,
        PolicyKind::SparseI,
        PolicyKind::SparseII,
        PolicyKind::Linear,
        PolicyKind::RiskOnly,
    ];

    fn needs_risk_model(&self) -> bool {
        !matches!(self, PolicyKind::ClinicalFramingham | PolicyKind::NaiveRandom)
    }

    fn feature_view(&self) -> FeatureView {
        match self {
            PolicyKind::SparseI => FeatureView::FraminghamOnly,
            PolicyKind::SparseII => FeatureView::FraminghamPlusAgeHba1c,
            _ => FeatureView::Full,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Ours => "ours",
            PolicyKind::ClinicalFramingham => "clinical_framingham",
            PolicyKind::NaiveRandom => "naive_random",
            PolicyKind::RiskOnly => "risk_only",
            PolicyKind::SparseI => "sparse_i",
            PolicyKind::SparseII => "sparse_ii",
            PolicyKind::Linear => "linear",
        }
    }
}

/// Independent seed streams for the stochastic stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub policy: u64,
    pub bootstrap: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            data: derive_seed(master, 0),
            model: derive_seed(master, 1),
            policy: derive_seed(master, 2),
            bootstrap: derive_seed(master, 3),
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_warmup() -> u32 {
    1
}

fn default_bootstrap_replicates() -> usize {
    100
}

/// Inclusive allocation-year range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YearRange {
    pub start: u32,
    pub end: u32,
}

impl YearRange {
    pub fn len(&self) -> usize {
        (self.end.saturating_sub(self.start) + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> {
        self.start..=self.end
    }
}

/// Full description of one evaluation run; also serves as the reproducible
/// run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub panel: PanelSource,
    pub policy: PolicyKind,
    pub budget_k: usize,
    pub years: YearRange,
    pub effect: EffectSpec,
    #[serde(default)]
    pub forest_params: CausalForestParams,
    #[serde(default = "default_risk_learner")]
    pub risk_learner: RiskLearnerKind,
    /// Hyperparameter search budget for the risk model; defaults to no
    /// search (learner defaults) to keep yearly retraining affordable.
    #[serde(default = "SearchConfig::defaults_only")]
    pub search: SearchConfig,
    /// Pin the risk learner's hyperparameters, skipping any search.
    #[serde(default)]
    pub risk_hyperparams: Option<crate::risk::RiskHyperparams>,
    #[serde(default)]
    pub cost_params: CostParams,
    pub seeds: Seeds,
    #[serde(default = "default_true")]
    pub retrain_each_year: bool,
    #[serde(default = "default_warmup")]
    pub warmup_years: u32,
    /// Gaussian noise added to the effect estimates in the allocation step
    /// only; outcome accounting keeps the unperturbed effects.
    #[serde(default)]
    pub allocation_noise_sd: f64,
    /// Quantize expected prevention to Bernoulli(γ) draws per treated onset.
    #[serde(default)]
    pub stochastic_outcomes: bool,
    #[serde(default = "default_bootstrap_replicates")]
    pub bootstrap_replicates: usize,
}

fn default_risk_learner() -> RiskLearnerKind {
    RiskLearnerKind::Gbdt
}

/// Aggregated metrics of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub policy: String,
    pub budget_k: usize,
    pub prevented_onsets: f64,
    pub cost_savings: f64,
    pub prevented_bootstrap_mean: f64,
    pub prevented_bootstrap_sd: f64,
    pub savings_bootstrap_mean: f64,
    pub savings_bootstrap_sd: f64,
    pub treated_patient_years: usize,
    pub enrolled_patients: usize,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub result: SimulationResult,
    pub plan: crate::policy::AllocationPlan,
    pub summary: ScenarioSummary,
}

struct ModelState {
    risk: Option<RiskModel>,
    forest: Option<CausalForest>,
}

/// Panel view with this run's enrollments overlaid on the data's treatment
/// flags (from each patient's enrollment year onward).
fn working_panel(
    base: &Panel,
    enrolled: &BTreeMap<PatientId, u32>,
) -> Result<Panel, CohortError> {
    let mut records = base.records().to_vec();
    for r in &mut records {
        if let Some(&since) = enrolled.get(&r.patient_id) {
            if r.year >= since {
                r.treated = true;
            }
        }
    }
    Panel::new(records, base.layout().clone())
}

fn comorbidity_flags(
    record_features: &[f64],
    indices: &[Option<usize>; N_COMORBIDITIES],
) -> [bool; N_COMORBIDITIES] {
    let mut flags = [false; N_COMORBIDITIES];
    for (f, idx) in flags.iter_mut().zip(indices) {
        if let Some(i) = idx {
            *f = record_features[*i] >= 0.5;
        }
    }
    flags
}

/// Run one scenario. Deterministic: identical configs produce identical
/// outputs byte for byte.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutput, SimError> {
    let panel = config.panel.load()?;
    config.effect.validate()?;
    config.cost_params.validate()?;
    let horizon = panel.horizon();
    if config.years.start < 1 || config.years.end > horizon || config.years.is_empty() {
        return Err(SimError::YearsOutOfRange {
            start: config.years.start,
            end: config.years.end,
            horizon,
        });
    }
    let min_start = 1 + config.warmup_years;
    if config.years.start < min_start {
        return Err(SimError::InsufficientHistory {
            start: config.years.start,
            warmup: config.warmup_years,
            min_start,
        });
    }
    let layout = panel.layout();
    let age_col = layout.require(columns::AGE)?;
    let comorbidity_cols: [Option<usize>; N_COMORBIDITIES] = {
        let mut cols = [None; N_COMORBIDITIES];
        for (c, name) in cols.iter_mut().zip(columns::COMORBIDITY_COLUMNS) {
            *c = layout.index_of(name);
        }
        cols
    };
    if config.policy == PolicyKind::ClinicalFramingham {
        // Fail early if the charting inputs are missing.
        if let Some(r) = panel.records().first() {
            FraminghamInputs::from_record(r, layout)?;
        }
    }

    // Patients never treated in the data form the allocation population.
    let population: BTreeSet<PatientId> = panel
        .patient_ids()
        .filter(|id| panel.first_treated_year(id).is_none())
        .cloned()
        .collect();

    let mut enrolled: BTreeMap<PatientId, u32> = BTreeMap::new();
    let mut plan = crate::policy::AllocationPlan::new(config.budget_k);
    let mut outcomes: Vec<PatientYearOutcome> = Vec::new();
    let mut models = ModelState { risk: None, forest: None };

    for year in config.years.iter() {
        let working = working_panel(&panel, &enrolled)?;

        // (1)–(2) refresh models on strictly-historical data.
        let needs_refresh = models.risk.is_none() && models.forest.is_none()
            || config.retrain_each_year;
        if needs_refresh {
            if config.policy.needs_risk_model() {
                let learner = if config.policy == PolicyKind::Linear {
                    RiskLearnerKind::Lasso
                } else {
                    config.risk_learner
                };
                let train = RiskTrainConfig {
                    learner,
                    feature_view: config.policy.feature_view(),
                    history_before: Some(year),
                    search: config.search.clone(),
                    fixed_params: if config.policy == PolicyKind::Linear {
                        // The linear ablation ignores pinned tree parameters.
                        config.risk_hyperparams.clone().filter(|p| {
                            matches!(p, crate::risk::RiskHyperparams::Linear { .. })
                        })
                    } else {
                        config.risk_hyperparams.clone()
                    },
                };
                models.risk =
                    Some(crate::risk::train_risk_model(&working, &train, derive_seed(config.seeds.model, year as u64))?);
            }
            if config.effect.mode == EffectMode::Forest {
                models.forest = Some(fit_causal_forest_history(
                    &panel,
                    &config.forest_params,
                    Some(year),
                    derive_seed(config.seeds.model, 10_000 + year as u64),
                )?);
            }
        }

        // (3) eligibility: alive, no observed transition, never treated by
        // the data or this run; scoring additionally needs this year's
        // features.
        let eligible = working.eligible_patients(year)?;
        let candidates: Vec<&crate::cohort::PatientRecord> = working
            .records_in_year(year)
            .filter(|r| eligible.contains(&r.patient_id) && population.contains(&r.patient_id))
            .collect();

        let effect_input = |features: &[f64]| -> Vec<f64> {
            let mut x = features.to_vec();
            if models.forest.as_ref().is_some_and(|f| f.expects_year_feature) {
                x.push(year as f64);
            }
            x
        };

        // (4) policy under budget.
        let policy_seed = derive_seed(config.seeds.policy, year as u64);
        let selection: Selection = match config.policy {
            PolicyKind::NaiveRandom => {
                let pool: BTreeSet<PatientId> =
                    candidates.iter().map(|r| r.patient_id.clone()).collect();
                random_policy(&pool, config.budget_k, policy_seed)
            }
            PolicyKind::ClinicalFramingham => {
                let mut scores = BTreeMap::new();
                for r in &candidates {
                    let inputs = FraminghamInputs::from_record(r, layout)?;
                    scores.insert(r.patient_id.clone(), framingham_score(&inputs) as f64);
                }
                threshold_policy(&scores, config.budget_k, policy_seed)
            }
            PolicyKind::RiskOnly => {
                let model = models.risk.as_ref().expect("risk model fitted");
                let mut risks = BTreeMap::new();
                for r in &candidates {
                    risks.insert(r.patient_id.clone(), model.predict_risk(&r.features)?);
                }
                risk_only_policy(&risks, config.budget_k, policy_seed)
            }
            PolicyKind::Ours | PolicyKind::SparseI | PolicyKind::SparseII | PolicyKind::Linear => {
                let model = models.risk.as_ref().expect("risk model fitted");
                let mut risks = BTreeMap::new();
                let mut gammas = BTreeMap::new();
                let mut noise = rng_from_seed(derive_seed(config.seeds.policy, 50_000 + year as u64));
                for r in &candidates {
                    risks.insert(r.patient_id.clone(), model.predict_risk(&r.features)?);
                    let gamma =
                        effect_at(&config.effect, models.forest.as_ref(), &effect_input(&r.features), 0)?;
                    let gamma = if config.allocation_noise_sd > 0.0 {
                        use rand_distr::{Distribution, Normal};
                        let eps = Normal::new(0.0, config.allocation_noise_sd)
                            .expect("valid sd")
                            .sample(&mut noise);
                        (gamma + eps).clamp(0.0, 1.0)
                    } else {
                        gamma
                    };
                    gammas.insert(r.patient_id.clone(), gamma);
                }
                select_topk(&risks, &gammas, config.budget_k, policy_seed)?
            }
        };
        for id in &selection.selected {
            enrolled.insert(id.clone(), year);
            plan.assign(id.clone(), year);
        }

        // (5) outcome accounting over the allocation population with a
        // record this year. Unperturbed effects drive the metrics.
        let mut stochastic = rng_from_seed(derive_seed(config.seeds.policy, 90_000 + year as u64));
        for r in working.records_in_year(year) {
            if !population.contains(&r.patient_id) {
                continue;
            }
            let enrolled_since = enrolled.get(&r.patient_id).copied();
            let treated_now = enrolled_since.is_some_and(|s| s <= year);
            let mut gamma = if treated_now {
                let years_on = year - enrolled_since.unwrap();
                effect_at(&config.effect, models.forest.as_ref(), &effect_input(&r.features), years_on)?
            } else {
                0.0
            };
            if config.stochastic_outcomes && treated_now && r.onset_next == Some(true) {
                use rand::Rng;
                gamma = if stochastic.gen::<f64>() < gamma { 1.0 } else { 0.0 };
            }
            outcomes.push(PatientYearOutcome {
                patient_id: r.patient_id.clone(),
                year,
                treated: treated_now,
                onset_next: r.onset_next,
                gamma,
                age: r.features[age_col],
                comorbidities: comorbidity_flags(&r.features, &comorbidity_cols),
            });
        }
    }

    plan.validate_budget().expect("policies respect the budget");
    let result = SimulationResult::new(outcomes, config.years.len());
    let prevented = prevented_onsets(&result)?;
    let savings = cost_savings(&result, &config.cost_params)?;
    let (pb, psd, sb, ssd) = if result.records.is_empty() {
        (0.0, 0.0, 0.0, 0.0)
    } else {
        let (pb, psd) =
            bootstrap(&result, prevented_onsets, config.bootstrap_replicates, config.seeds.bootstrap)?;
        let cp = config.cost_params.clone();
        let (sb, ssd) = bootstrap(
            &result,
            move |r| cost_savings(r, &cp),
            config.bootstrap_replicates,
            derive_seed(config.seeds.bootstrap, 1),
        )?;
        (pb, psd, sb, ssd)
    };
    let summary = ScenarioSummary {
        policy: config.policy.as_str().to_string(),
        budget_k: config.budget_k,
        prevented_onsets: prevented,
        cost_savings: savings,
        prevented_bootstrap_mean: pb,
        prevented_bootstrap_sd: psd,
        savings_bootstrap_mean: sb,
        savings_bootstrap_sd: ssd,
        treated_patient_years: result.records.iter().filter(|r| r.treated).count(),
        enrolled_patients: enrolled.len(),
    };
    Ok(ScenarioOutput { result, plan, summary })
}

/// One row of a sweep or ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub policy: String,
    pub prevented_onsets: f64,
    pub prevented_sd: f64,
    pub cost_savings: f64,
    pub savings_sd: f64,
}

impl SweepRow {
    fn from_summary(s: &ScenarioSummary) -> Self {
        Self {
            k: s.budget_k,
            policy: s.policy.clone(),
            prevented_onsets: s.prevented_onsets,
            prevented_sd: s.prevented_bootstrap_sd,
            cost_savings: s.cost_savings,
            savings_sd: s.savings_bootstrap_sd,
        }
    }
}

/// Evaluate the scenario across budgets with shared seeds.
pub fn budget_sweep(config: &ScenarioConfig, k_values: &[usize]) -> Result<Vec<SweepRow>, SimError> {
    assert!(!k_values.is_empty(), "sweep needs at least one budget");
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut cfg = config.clone();
        cfg.budget_k = k;
        let out = run_scenario(&cfg)?;
        rows.push(SweepRow::from_summary(&out.summary));
    }
    Ok(rows)
}

/// Run the model-specification ablations (main, sparse inputs, linear
/// learner, risk-only ranking) with shared seeds.
pub fn ablation_suite(base: &ScenarioConfig) -> Result<Vec<SweepRow>, SimError> {
    let mut rows = Vec::new();
    for policy in PolicyKind::ABLATION_SET {
        let mut cfg = base.clone();
        cfg.policy = policy;
        let out = run_scenario(&cfg)?;
        rows.push(SweepRow::from_summary(&out.summary));
    }
    Ok(rows)
}

/// Write sweep/ablation rows as CSV
/// (`k,policy,prevented_onsets,prevented_sd,cost_savings,savings_sd`).
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), SimError> {
    let mut out = String::from("k,policy,prevented_onsets,prevented_sd,cost_savings,savings_sd\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.k, r.policy, r.prevented_onsets, r.prevented_sd, r.cost_savings, r.savings_sd
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
