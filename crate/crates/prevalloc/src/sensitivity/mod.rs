//! Robustness studies: Gaussian noise on effect estimates, training-size
//! convergence against the oracle allocation, omitted-variable-bias bounds
//! (with effect-based patient subgroups), and feature-importance
//! explanations.

pub mod importance;
pub mod ovb;

pub use importance::{feature_importance, FeatureImportance, ImportanceConfig, ImportanceMethod};
pub use ovb::{ols, ovb_sensitivity, ovb_sensitivity_arrays, OlsFit, OvbError, OvbRow, OvbTable};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{generate_synthetic_cohort, CohortError, GenConfig};
use crate::learners::tree::{fit_regression_tree, Node};
use crate::learners::{
    fit_gbdt, fit_linear, FittedLearner, GbdtParams, LearnerError, Penalty,
};
use crate::linalg::Matrix;
use crate::policy::{risk_only_policy, PolicyError};
use crate::rng::{derive_seed, rng_from_seed};
use crate::simulation::{run_scenario, PanelSource, ScenarioConfig, Seeds, SimError};

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Ovb(#[from] OvbError),
    #[error(transparent)]
    Risk(#[from] crate::risk::RiskError),
    #[error(transparent)]
    Effect(#[from] crate::effect::EffectError),
    #[error("invalid study config: {0}")]
    InvalidConfig(String),
}

/// Clip-to-[0,1] Gaussian perturbation of effect estimates. `sigma == 0` is
/// the exact identity.
pub fn perturb_effects(gammas: &[f64], sigma: f64, seed: u64) -> Vec<f64> {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return gammas.to_vec();
    }
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sd");
    gammas.iter().map(|&g| (g + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect()
}

/// Noise-robustness study configuration: the base scenario is re-run for
/// each noise level over paired seed replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseStudyConfig {
    pub scenario: ScenarioConfig,
    pub sigmas: Vec<f64>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: u64,
}

fn default_n_seeds() -> u64 {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma: f64,
    pub prevented_mean: f64,
    pub prevented_sd: f64,
    pub savings_mean: f64,
    pub savings_sd: f64,
}

fn seed_variant(base: &ScenarioConfig, replicate: u64) -> ScenarioConfig {
    let mut cfg = base.clone();
    let master = derive_seed(base.seeds.data, replicate);
    cfg.seeds = Seeds::from_master(master);
    if let PanelSource::Synthetic(gen) = &mut cfg.panel {
        gen.seed = derive_seed(gen.seed, replicate);
    }
    cfg
}

/// Re-run the scenario with noise level σ applied to the effect estimates in
/// the allocation step only (outcome accounting keeps the unperturbed
/// effects), averaged over paired seed replicates.
pub fn noise_robustness_study(config: &NoiseStudyConfig) -> Result<Vec<NoiseRow>, SensitivityError> {
    if config.sigmas.is_empty() {
        return Err(SensitivityError::InvalidConfig("sigmas must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(config.sigmas.len());
    for &sigma in &config.sigmas {
        if sigma < 0.0 {
            return Err(SensitivityError::InvalidConfig(format!("negative sigma {sigma}")));
        }
        let mut prevented = Vec::new();
        let mut savings = Vec::new();
        for rep in 0..config.n_seeds {
            let mut cfg = seed_variant(&config.scenario, rep);
            cfg.allocation_noise_sd = sigma;
            let out = run_scenario(&cfg)?;
            prevented.push(out.summary.prevented_onsets);
            savings.push(out.summary.cost_savings);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64], m: f64| {
            if v.len() < 2 {
                0.0
            } else {
                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
            }
        };
        let (pm, sm) = (mean(&prevented), mean(&savings));
        rows.push(NoiseRow {
            sigma,
            prevented_mean: pm,
            prevented_sd: sd(&prevented, pm),
            savings_mean: sm,
            savings_sd: sd(&savings, sm),
        });
    }
    Ok(rows)
}

/// Which learner the convergence study trains at each sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceLearner {
    Gbdt(GbdtParams),
    Lasso { alpha: f64 },
    /// Score by the generating process's own latent risk (upper bound).
    Oracle,
}

impl Default for ConvergenceLearner {
    fn default() -> Self {
        ConvergenceLearner::Gbdt(GbdtParams::default())
    }
}

/// Training-size convergence study on the synthetic static process: train
/// the risk model on nested subsets, allocate under a known constant effect,
/// and compare against the oracle allocation built from true latent risks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Static (horizon-1, untreated) generating process for both the
    /// training pools and the evaluation population.
    pub gen: GenConfig,
    /// Evaluation population size N.
    pub population: usize,
    pub budget_k: usize,
    pub n_train_values: Vec<usize>,
    #[serde(default = "default_conv_seeds")]
    pub n_seeds: u64,
    /// Known constant treatment effect applied to enrollees.
    pub known_gamma: f64,
    #[serde(default)]
    pub learner: ConvergenceLearner,
}

fn default_conv_seeds() -> u64 {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n_train: usize,
    /// Expected prevented onsets of the learned allocation, seed-averaged.
    pub prevented: f64,
    /// Expected prevented onsets of the oracle allocation.
    pub oracle_prevented: f64,
    pub ratio: f64,
}

/// Expected prevented onsets of a selection under a known constant effect:
/// `γ · Σ_selected p_true(i)`.
fn expected_prevention(
    gen: &GenConfig,
    panel_features: &[(crate::cohort::PatientId, Vec<f64>)],
    selected: &std::collections::BTreeSet<crate::cohort::PatientId>,
    gamma: f64,
) -> f64 {
    let core = gen.core_dim();
    panel_features
        .iter()
        .filter(|(id, _)| selected.contains(id))
        .map(|(_, x)| gen.onset_probability(gen.latent_risk(&x[..core])))
        .sum::<f64>()
        * gamma
}

pub fn convergence_study(config: &ConvergenceConfig) -> Result<Vec<ConvergenceRow>, SensitivityError> {
    if config.n_train_values.is_empty() {
        return Err(SensitivityError::InvalidConfig("n_train_values must be non-empty".into()));
    }
    let mut sorted = config.n_train_values.clone();
    sorted.sort_unstable();
    let max_train = *sorted.last().unwrap();
    let core = config.gen.core_dim();

    let mut sums = vec![(0.0f64, 0.0f64); sorted.len()];
    for rep in 0..config.n_seeds {
        // One nested training pool and one evaluation population per seed.
        let mut train_gen = config.gen.clone();
        train_gen.n_patients = max_train;
        train_gen.horizon = 1;
        train_gen.treated_fraction = 0.0;
        train_gen.seed = derive_seed(config.gen.seed, 2 * rep);
        let train_panel = generate_synthetic_cohort(&train_gen)?;
        let train_records: Vec<(Vec<f64>, bool)> = train_panel
            .records_in_year(1)
            .map(|r| (r.features.clone(), r.onset_next == Some(true)))
            .collect();

        let mut eval_gen = config.gen.clone();
        eval_gen.n_patients = config.population;
        eval_gen.horizon = 1;
        eval_gen.treated_fraction = 0.0;
        eval_gen.seed = derive_seed(config.gen.seed, 2 * rep + 1);
        let eval_panel = generate_synthetic_cohort(&eval_gen)?;
        let eval_features: Vec<(crate::cohort::PatientId, Vec<f64>)> = eval_panel
            .records_in_year(1)
            .map(|r| (r.patient_id.clone(), r.features.clone()))
            .collect();

        // Oracle allocation from true latent risks.
        let oracle_scores: std::collections::BTreeMap<crate::cohort::PatientId, f64> =
            eval_features
                .iter()
                .map(|(id, x)| (id.clone(), config.gen.latent_risk(&x[..core])))
                .collect();
        let oracle_sel =
            risk_only_policy(&oracle_scores, config.budget_k, derive_seed(rep, 999));
        let oracle_value =
            expected_prevention(&config.gen, &eval_features, &oracle_sel.selected, config.known_gamma);

        for (slot, &n_train) in sorted.iter().enumerate() {
            // Nested prefix of the training pool.
            let prefix = &train_records[..n_train.min(train_records.len())];
            let x = Matrix::from_rows(&prefix.iter().map(|(f, _)| f.clone()).collect::<Vec<_>>());
            let y: Vec<bool> = prefix.iter().map(|(_, y)| *y).collect();
            let model: Option<FittedLearner> = match &config.learner {
                ConvergenceLearner::Gbdt(params) => {
                    let mut p = params.clone();
                    p.min_child_samples = p.min_child_samples.min((n_train / 4).max(1));
                    Some(FittedLearner::Gbdt(fit_gbdt(&x, &y, &p, derive_seed(rep, slot as u64))?))
                }
                ConvergenceLearner::Lasso { alpha } => Some(FittedLearner::Linear(fit_linear(
                    &x,
                    &y,
                    Penalty::L1,
                    *alpha,
                    derive_seed(rep, slot as u64),
                )?)),
                ConvergenceLearner::Oracle => None,
            };
            let scores: std::collections::BTreeMap<crate::cohort::PatientId, f64> = eval_features
                .iter()
                .map(|(id, x)| {
                    let s = match &model {
                        Some(m) => crate::learners::predict_proba(m, x).unwrap_or(0.0),
                        None => config.gen.latent_risk(&x[..core]),
                    };
                    (id.clone(), s)
                })
                .collect();
            let sel = risk_only_policy(&scores, config.budget_k, derive_seed(rep, 777 + slot as u64));
            let value =
                expected_prevention(&config.gen, &eval_features, &sel.selected, config.known_gamma);
            sums[slot].0 += value;
            sums[slot].1 += oracle_value;
        }
    }
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(slot, n_train)| {
            let prevented = sums[slot].0 / config.n_seeds as f64;
            let oracle = sums[slot].1 / config.n_seeds as f64;
            ConvergenceRow { n_train, prevented, oracle_prevented: oracle, ratio: prevented / oracle }
        })
        .collect())
}

/// Patient subgroups by estimated treatment effect: a shallow regression
/// tree (features → effect estimate) whose leaves define the groups, named
/// "A", "B", ... in decreasing mean-effect order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CateSubgroups {
    /// Group index per input row.
    pub labels: Vec<usize>,
    pub group_names: Vec<String>,
    /// Mean effect estimate per group, decreasing.
    pub group_means: Vec<f64>,
    /// Set when fewer distinct effect values than requested groups forced a
    /// smaller grouping.
    pub degenerate: bool,
}

pub fn cate_subgroups(
    cate_estimates: &[f64],
    features: &Matrix,
    n_groups: usize,
) -> CateSubgroups {
    assert!(n_groups >= 2, "need at least two groups");
    assert_eq!(cate_estimates.len(), features.n_rows());
    let distinct = {
        let mut v = cate_estimates.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    let target = n_groups.min(distinct);
    let depth = (target as f64).log2().ceil() as usize;
    let rows: Vec<usize> = (0..features.n_rows()).collect();
    let tree = fit_regression_tree(features, cate_estimates, &rows, target, Some(depth.max(1)), 1);

    // Map leaves to groups ordered by decreasing leaf value.
    let mut leaves: Vec<(usize, f64)> = tree
        .nodes()
        .iter()
        .enumerate()
        .filter_map(|(i, n)| match n {
            Node::Leaf { value, .. } => Some((i, *value)),
            _ => None,
        })
        .collect();
    leaves.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let group_of_leaf: std::collections::BTreeMap<usize, usize> =
        leaves.iter().enumerate().map(|(g, (leaf, _))| (*leaf, g)).collect();

    let labels: Vec<usize> =
        (0..features.n_rows()).map(|i| group_of_leaf[&tree.leaf_index(features.row(i))]).collect();
    let degenerate = leaves.len() < n_groups;
    if degenerate {
        log::warn!(
            "requested {n_groups} effect subgroups but only {} are distinguishable",
            leaves.len()
        );
    }
    CateSubgroups {
        labels,
        group_names: (0..leaves.len()).map(|g| ((b'A' + g as u8) as char).to_string()).collect(),
        group_means: leaves.iter().map(|(_, v)| *v).collect(),
        degenerate,
    }
}

/// Omitted-variable-bias study over a panel, optionally repeated per
/// effect-estimate subgroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OvbStudyConfig {
    pub panel: PanelSource,
    /// Covariate column names for the outcome regression.
    pub covariates: Vec<String>,
    /// Observed covariate whose strength benchmarks the confounder.
    pub benchmark: String,
    pub multipliers: Vec<f64>,
    /// Re-run the analysis within effect subgroups from a causal forest.
    #[serde(default)]
    pub subgroups: Option<SubgroupSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubgroupSpec {
    pub n_groups: usize,
    pub forest: crate::effect::CausalForestParams,
    pub seed: u64,
}

impl Default for SubgroupSpec {
    fn default() -> Self {
        Self { n_groups: 4, forest: crate::effect::CausalForestParams::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvbStudyOutput {
    /// Whole-sample table under group name "all".
    pub tables: Vec<(String, OvbTable)>,
}

pub fn run_ovb_study(config: &OvbStudyConfig) -> Result<OvbStudyOutput, SensitivityError> {
    let panel = config.panel.load()?;
    let covariate_names: Vec<&str> = config.covariates.iter().map(|s| s.as_str()).collect();
    let mut tables = vec![(
        "all".to_string(),
        ovb_sensitivity(&panel, &covariate_names, &config.benchmark, &config.multipliers)?,
    )];

    if let Some(spec) = &config.subgroups {
        let forest = crate::effect::fit_causal_forest(&panel, &spec.forest, spec.seed)?;
        // One effect estimate per patient, from their first record.
        let mut patient_rows: Vec<(crate::cohort::PatientId, Vec<f64>)> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for r in panel.records() {
            if seen.insert(r.patient_id.clone()) {
                let mut x = r.features.clone();
                if forest.expects_year_feature {
                    x.push(r.year as f64);
                }
                patient_rows.push((r.patient_id.clone(), x));
            }
        }
        let cate: Vec<f64> =
            patient_rows.iter().map(|(_, x)| forest.estimate_cate(x)).collect::<Result<_, _>>()?;
        let features =
            Matrix::from_rows(&patient_rows.iter().map(|(_, x)| x.clone()).collect::<Vec<_>>());
        let groups = cate_subgroups(&cate, &features, spec.n_groups);
        for (g, name) in groups.group_names.iter().enumerate() {
            let members: std::collections::BTreeSet<&crate::cohort::PatientId> = patient_rows
                .iter()
                .zip(&groups.labels)
                .filter(|(_, &label)| label == g)
                .map(|((id, _), _)| id)
                .collect();
            let records: Vec<crate::cohort::PatientRecord> = panel
                .records()
                .iter()
                .filter(|r| members.contains(&r.patient_id))
                .cloned()
                .collect();
            let sub = crate::cohort::Panel::new(records, panel.layout().clone())?;
            let table =
                ovb_sensitivity(&sub, &covariate_names, &config.benchmark, &config.multipliers)?;
            tables.push((name.clone(), table));
        }
    }
    Ok(OvbStudyOutput { tables })
}

/// Feature-importance study: train a risk model on the panel, then rank its
/// input columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceStudyConfig {
    pub panel: PanelSource,
    pub learner: crate::risk::RiskLearnerKind,
    pub method: ImportanceMethod,
    #[serde(default)]
    pub budget: ImportanceConfig,
    #[serde(default = "crate::risk::SearchConfig::defaults_only")]
    pub search: crate::risk::SearchConfig,
    pub seed: u64,
}

pub fn run_importance_study(
    config: &ImportanceStudyConfig,
) -> Result<Vec<FeatureImportance>, SensitivityError> {
    let panel = config.panel.load()?;
    let train = crate::risk::RiskTrainConfig {
        learner: config.learner,
        feature_view: crate::risk::FeatureView::Full,
        history_before: None,
        search: config.search.clone(),
        fixed_params: None,
    };
    let model = crate::risk::train_risk_model(&panel, &train, config.seed)?;
    // Evaluate on the same never-treated labeled records the model trains on.
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for r in panel.records() {
        let Some(onset) = r.onset_next else { continue };
        let untreated_era =
            !r.treated && panel.first_treated_year(&r.patient_id).map_or(true, |t| t > r.year);
        if untreated_era {
            rows.push(r.features.clone());
            y.push(onset);
        }
    }
    let x = Matrix::from_rows(&rows);
    Ok(feature_importance(
        &model,
        &x,
        &y,
        panel.layout().names(),
        config.method,
        &config.budget,
        derive_seed(config.seed, 1),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn perturb_sigma_zero_is_identity() {
        let gammas = vec![0.0, 0.25, 0.5, 1.0];
        assert_eq!(perturb_effects(&gammas, 0.0, 3), gammas);
    }

    #[test]
    fn perturb_clips_into_unit_interval() {
        let gammas = vec![0.9; 200];
        let noisy = perturb_effects(&gammas, 5.0, 1);
        assert!(noisy.iter().all(|&g| (0.0..=1.0).contains(&g)));
        assert!(noisy.iter().any(|&g| g == 1.0), "large draws should hit the clip");
    }

    #[test]
    fn perturb_mean_preserved_when_clip_negligible() {
        let gammas = vec![0.5; 100_000];
        let noisy = perturb_effects(&gammas, 0.1, 7);
        let mean = noisy.iter().sum::<f64>() / noisy.len() as f64;
        assert!((mean - 0.5).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn subgroups_split_bimodal_effects_at_the_gap() {
        // effects 0.1 vs 0.5 driven by feature 0
        let mut rows = Vec::new();
        let mut cate = Vec::new();
        let mut rng = rng_from_seed(5);
        for _ in 0..200 {
            let x0: f64 = rng.gen_range(0.0..1.0);
            rows.push(vec![x0, rng.gen_range(0.0..1.0)]);
            cate.push(if x0 > 0.5 { 0.5 } else { 0.1 });
        }
        let groups = cate_subgroups(&cate, &Matrix::from_rows(&rows), 4);
        assert!(groups.degenerate);
        assert_eq!(groups.group_names.len(), 2);
        // group 0 (name "A") holds the larger effects
        for (i, row) in rows.iter().enumerate() {
            let expected = if row[0] > 0.5 { 0 } else { 1 };
            assert_eq!(groups.labels[i], expected, "row {i}");
        }
    }

    #[test]
    fn subgroups_constant_cate_collapses_to_one_group() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64]).collect();
        let cate = vec![0.3; 50];
        let groups = cate_subgroups(&cate, &Matrix::from_rows(&rows), 4);
        assert!(groups.degenerate);
        assert_eq!(groups.group_names, vec!["A"]);
        assert!(groups.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn subgroups_partition_into_four_quartile_groups() {
        let mut rows = Vec::new();
        let mut cate = Vec::new();
        for i in 0..400 {
            let x = i as f64 / 400.0;
            rows.push(vec![x]);
            cate.push(if x < 0.25 {
                0.1
            } else if x < 0.5 {
                0.3
            } else if x < 0.75 {
                0.5
            } else {
                0.7
            });
        }
        let groups = cate_subgroups(&cate, &Matrix::from_rows(&rows), 4);
        assert!(!groups.degenerate);
        assert_eq!(groups.group_names.len(), 4);
        // every row in exactly one group, all four non-empty
        let mut counts = [0usize; 4];
        for &l in &groups.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 100), "{counts:?}");
        // means decreasing with group index
        for w in groups.group_means.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn convergence_oracle_learner_attains_oracle_exactly() {
        let cfg = ConvergenceConfig {
            gen: crate::cohort::GenConfig {
                n_patients: 0,
                horizon: 1,
                feature_mean: vec![50.0, 170.0, 27.0],
                feature_cov: vec![
                    vec![20.0, 0.0, 5.0],
                    vec![0.0, 50.0, 5.0],
                    vec![5.0, 5.0, 5.0],
                ],
                risk_weights: vec![0.5, 0.1, 0.2],
                risk_scale: 100.0,
                onset_threshold: 0.7,
                noise_sd: 1.0,
                true_effect: 0.31,
                treated_fraction: 0.0,
                confounding_strength: 0.0,
                seed: 11,
                core_names: Some(vec!["age".into(), "height".into(), "bmi".into()]),
                binary_features: vec![],
                noise_groups: vec![],
                effect_heterogeneity: None,
                glucose_feature: false,
            },
            population: 800,
            budget_k: 80,
            n_train_values: vec![100, 400],
            n_seeds: 2,
            known_gamma: 0.31,
            learner: ConvergenceLearner::Oracle,
        };
        let rows = convergence_study(&cfg).unwrap();
        for row in rows {
            assert!((row.ratio - 1.0).abs() < 1e-12, "oracle ratio {}", row.ratio);
        }
    }
}
