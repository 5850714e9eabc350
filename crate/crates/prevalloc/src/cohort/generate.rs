//! Synthetic cohort generation.
//!
//! The core of the data-generating process: patient covariates `x ~ N(μ, Σ)`,
//! a latent onset risk `sigmoid(wᵀx / scale)`, and observed labels from a
//! noisy threshold crossing `y = 1 iff risk + ε ≥ threshold`. Treated
//! patients have their onset probability scaled by `1 − γ`. Treatment
//! assignment is either uniform at a target fraction or tilted toward
//! higher-risk patients through a logistic model whose intercept is solved by
//! bisection so the target fraction is preserved.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{columns, CohortError, FeatureLayout, Panel, PatientId, PatientRecord};
use crate::linalg::{cholesky_psd, sigmoid, Matrix};
use crate::rng::{derive_seed, rng_from_seed};

/// Binary covariate appended after the Gaussian core block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryFeatureSpec {
    pub name: String,
    pub prevalence: f64,
}

/// Block of independent Bernoulli indicator columns (`{prefix}0`,
/// `{prefix}1`, ...) emulating lab/disease-code/drug indicator groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseGroupSpec {
    pub prefix: String,
    pub count: usize,
    pub prevalence: f64,
}

/// Optional per-patient treatment-effect heterogeneity:
/// `γ_i = clamp(true_effect + wᵀ(x_core − μ) / scale, 0, 1)`.
///
/// With zero weights (or `None`) the effect is the constant `true_effect`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectHeterogeneity {
    pub weights: Vec<f64>,
    pub scale: f64,
}

/// Configuration of the synthetic data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_patients: usize,
    pub horizon: u32,
    /// Mean of the Gaussian core covariate block.
    pub feature_mean: Vec<f64>,
    /// Covariance of the core block; must be symmetric PSD.
    pub feature_cov: Vec<Vec<f64>>,
    /// Linear risk weights over the core block.
    pub risk_weights: Vec<f64>,
    /// Divisor applied to the linear index before the sigmoid.
    pub risk_scale: f64,
    /// Label threshold in (0, 1).
    pub onset_threshold: f64,
    /// Standard deviation of the label noise ε.
    pub noise_sd: f64,
    /// Treatment effect γ in [0, 1]: relative reduction in onset probability.
    pub true_effect: f64,
    /// Fraction of patients assigned to (observational) treatment.
    pub treated_fraction: f64,
    /// Logistic tilt of treatment assignment toward higher latent risk;
    /// 0 gives uniform assignment at `treated_fraction`.
    pub confounding_strength: f64,
    pub seed: u64,
    /// Names for the core block columns (defaults to `x0..`).
    #[serde(default)]
    pub core_names: Option<Vec<String>>,
    #[serde(default)]
    pub binary_features: Vec<BinaryFeatureSpec>,
    #[serde(default)]
    pub noise_groups: Vec<NoiseGroupSpec>,
    #[serde(default)]
    pub effect_heterogeneity: Option<EffectHeterogeneity>,
    /// Mirror the per-record fasting glucose as a feature column.
    #[serde(default)]
    pub glucose_feature: bool,
}

impl GenConfig {
    pub fn core_dim(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        let n = self.core_dim();
        if self.feature_cov.len() != n || self.feature_cov.iter().any(|r| r.len() != n) {
            return Err(CohortError::InvalidConfig(format!(
                "feature_cov must be {n}x{n} to match feature_mean"
            )));
        }
        if self.risk_weights.len() != n {
            return Err(CohortError::InvalidConfig(format!(
                "risk_weights has length {}, feature_mean has {n}",
                self.risk_weights.len()
            )));
        }
        if !(self.onset_threshold > 0.0 && self.onset_threshold < 1.0) {
            return Err(CohortError::InvalidConfig("onset_threshold must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.true_effect) {
            return Err(CohortError::InvalidConfig("true_effect must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.treated_fraction) {
            return Err(CohortError::InvalidConfig("treated_fraction must lie in [0, 1]".into()));
        }
        if self.noise_sd < 0.0 {
            return Err(CohortError::InvalidConfig("noise_sd must be non-negative".into()));
        }
        if self.risk_scale == 0.0 {
            return Err(CohortError::InvalidConfig("risk_scale must be non-zero".into()));
        }
        if self.horizon < 1 {
            return Err(CohortError::InvalidConfig("horizon must be at least 1".into()));
        }
        if let Some(h) = &self.effect_heterogeneity {
            if h.weights.len() != n {
                return Err(CohortError::InvalidConfig(
                    "effect_heterogeneity.weights must match feature_mean length".into(),
                ));
            }
            if h.scale == 0.0 {
                return Err(CohortError::InvalidConfig("effect_heterogeneity.scale must be non-zero".into()));
            }
        }
        if let Some(names) = &self.core_names {
            if names.len() != n {
                return Err(CohortError::InvalidConfig("core_names must match feature_mean length".into()));
            }
        }
        for b in &self.binary_features {
            if !(0.0..=1.0).contains(&b.prevalence) {
                return Err(CohortError::InvalidConfig(format!("prevalence of `{}` outside [0, 1]", b.name)));
            }
        }
        for g in &self.noise_groups {
            if !(0.0..=1.0).contains(&g.prevalence) {
                return Err(CohortError::InvalidConfig(format!("prevalence of `{}*` outside [0, 1]", g.prefix)));
            }
        }
        Ok(())
    }

    /// Feature layout implied by this configuration: core block, binary
    /// block, indicator groups, then the optional glucose mirror column.
    pub fn layout(&self) -> Result<FeatureLayout, CohortError> {
        let mut names: Vec<String> = match &self.core_names {
            Some(n) => n.clone(),
            None => (0..self.core_dim()).map(|i| format!("x{i}")).collect(),
        };
        for b in &self.binary_features {
            names.push(b.name.clone());
        }
        for g in &self.noise_groups {
            for i in 0..g.count {
                names.push(format!("{}{i}", g.prefix));
            }
        }
        if self.glucose_feature {
            names.push(columns::FASTING_GLUCOSE.to_string());
        }
        FeatureLayout::new(names)
    }

    /// Latent onset risk for a core covariate vector.
    pub fn latent_risk(&self, x_core: &[f64]) -> f64 {
        let lin: f64 = self.risk_weights.iter().zip(x_core).map(|(w, x)| w * x).sum();
        sigmoid(lin / self.risk_scale)
    }

    /// True treatment effect for a core covariate vector.
    pub fn true_gamma(&self, x_core: &[f64]) -> f64 {
        match &self.effect_heterogeneity {
            None => self.true_effect,
            Some(h) => {
                let shift: f64 = h
                    .weights
                    .iter()
                    .zip(x_core.iter().zip(&self.feature_mean))
                    .map(|(w, (x, m))| w * (x - m))
                    .sum();
                (self.true_effect + shift / h.scale).clamp(0.0, 1.0)
            }
        }
    }

    /// Probability that the noisy threshold crossing fires for a given latent
    /// risk: `P(latent + ε ≥ threshold)`.
    pub fn onset_probability(&self, latent: f64) -> f64 {
        if self.noise_sd == 0.0 {
            return if latent >= self.onset_threshold { 1.0 } else { 0.0 };
        }
        let z = (self.onset_threshold - latent) / self.noise_sd;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        1.0 - normal.cdf(z)
    }
}

/// Solve the assignment intercept `a` so that the mean of
/// `sigmoid(a + b·latent_i)` over the cohort equals `target`.
fn solve_assignment_intercept(latents: &[f64], b: f64, target: f64) -> f64 {
    let mean_p = |a: f64| latents.iter().map(|&l| sigmoid(a + b * l)).sum::<f64>() / latents.len() as f64;
    let tilt_lo = latents.iter().map(|&l| b * l).fold(f64::INFINITY, f64::min);
    let tilt_hi = latents.iter().map(|&l| b * l).fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (-tilt_hi - 60.0, -tilt_lo + 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generate a synthetic longitudinal panel. Deterministic given the seed:
/// identical configs produce identical panels.
///
/// Per patient: covariates are drawn once; the age column (when the layout
/// names one) advances by one per year. Labels are drawn independently per
/// year from the onset probability; a positive label is absorbing — the
/// transition is recorded on the patient's final prediabetic record and no
/// later records are emitted.
pub fn generate_synthetic_cohort(config: &GenConfig) -> Result<Panel, CohortError> {
    config.validate()?;
    let layout = config.layout()?;
    let n_core = config.core_dim();
    let cov = Matrix::from_rows(&config.feature_cov.iter().map(|r| r.clone()).collect::<Vec<_>>());
    let chol = cholesky_psd(&cov)?;

    let mut rng_features = rng_from_seed(derive_seed(config.seed, 0));
    let mut rng_assign = rng_from_seed(derive_seed(config.seed, 1));
    let mut rng_labels = rng_from_seed(derive_seed(config.seed, 2));

    let id_width = config.n_patients.saturating_sub(1).to_string().len().max(4);
    let age_col = layout.index_of(columns::AGE);

    // Pass 1: covariates and latent risks for the whole cohort. The
    // assignment intercept depends on the full latent distribution.
    let mut base_features: Vec<Vec<f64>> = Vec::with_capacity(config.n_patients);
    let mut latents: Vec<f64> = Vec::with_capacity(config.n_patients);
    let mut gammas: Vec<f64> = Vec::with_capacity(config.n_patients);
    for _ in 0..config.n_patients {
        let z: Vec<f64> = (0..n_core).map(|_| StandardNormal.sample(&mut rng_features)).collect();
        let mut x = vec![0.0; n_core];
        for i in 0..n_core {
            let mut v = config.feature_mean[i];
            for k in 0..=i {
                v += chol.get(i, k) * z[k];
            }
            x[i] = v;
        }
        let mut row = x.clone();
        for b in &config.binary_features {
            row.push(if rng_features.gen::<f64>() < b.prevalence { 1.0 } else { 0.0 });
        }
        for g in &config.noise_groups {
            for _ in 0..g.count {
                row.push(if rng_features.gen::<f64>() < g.prevalence { 1.0 } else { 0.0 });
            }
        }
        latents.push(config.latent_risk(&x));
        gammas.push(config.true_gamma(&x));
        base_features.push(row);
    }

    // Pass 2: treatment assignment.
    let treated: Vec<bool> = if config.treated_fraction <= 0.0 {
        vec![false; config.n_patients]
    } else if config.treated_fraction >= 1.0 {
        vec![true; config.n_patients]
    } else if config.confounding_strength == 0.0 {
        (0..config.n_patients).map(|_| rng_assign.gen::<f64>() < config.treated_fraction).collect()
    } else {
        let a = solve_assignment_intercept(&latents, config.confounding_strength, config.treated_fraction);
        latents
            .iter()
            .map(|&l| rng_assign.gen::<f64>() < sigmoid(a + config.confounding_strength * l))
            .collect()
    };

    // Pass 3: per-year glucose and labels; onset is absorbing.
    let mut records = Vec::with_capacity(config.n_patients * config.horizon as usize);
    for (idx, base) in base_features.iter().enumerate() {
        let patient_id = PatientId::new(format!("p{idx:0id_width$}"));
        let p_untreated = config.onset_probability(latents[idx]);
        let p_onset = if treated[idx] { p_untreated * (1.0 - gammas[idx]) } else { p_untreated };
        for year in 1..=config.horizon {
            let glucose = PREDIABETIC_GLUCOSE_RANGE.0
                + rng_labels.gen::<f64>() * (PREDIABETIC_GLUCOSE_RANGE.1 - PREDIABETIC_GLUCOSE_RANGE.0);
            let onset = rng_labels.gen::<f64>() < p_onset;
            let mut features = base.clone();
            if let Some(a) = age_col {
                features[a] += (year - 1) as f64;
            }
            if config.glucose_feature {
                features.push(glucose);
            }
            records.push(PatientRecord {
                patient_id: patient_id.clone(),
                year,
                features,
                treated: treated[idx],
                onset_next: Some(onset),
                died: false,
                fasting_glucose: glucose,
            });
            if onset {
                break;
            }
        }
    }
    Panel::new(records, layout)
}

const PREDIABETIC_GLUCOSE_RANGE: (f64, f64) = (super::PREDIABETIC_GLUCOSE_MMOL_L, super::ONSET_GLUCOSE_MMOL_L);

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn three_feature_config() -> GenConfig {
        GenConfig {
            n_patients: 2000,
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
            seed: 7,
            core_names: Some(vec!["age".into(), "height".into(), "bmi".into()]),
            binary_features: vec![],
            noise_groups: vec![],
            effect_heterogeneity: None,
            glucose_feature: false,
        }
    }

    #[test]
    fn determinism_same_seed_same_panel() {
        let cfg = three_feature_config();
        let a = generate_synthetic_cohort(&cfg).unwrap();
        let b = generate_synthetic_cohort(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_different_panel() {
        let mut cfg = three_feature_config();
        let a = generate_synthetic_cohort(&cfg).unwrap();
        cfg.seed = 8;
        let b = generate_synthetic_cohort(&cfg).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_weights_zero_noise_yields_no_onsets() {
        let mut cfg = three_feature_config();
        cfg.risk_weights = vec![0.0, 0.0, 0.0];
        cfg.noise_sd = 0.0;
        cfg.n_patients = 500;
        let panel = generate_synthetic_cohort(&cfg).unwrap();
        // latent risk is sigmoid(0) = 0.5 < 0.7 threshold for everyone
        assert!(panel.records().iter().all(|r| r.onset_next == Some(false)));
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let mut cfg = three_feature_config();
        cfg.feature_cov = vec![
            vec![1.0, 2.0, 0.0],
            vec![2.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        assert!(matches!(
            generate_synthetic_cohort(&cfg),
            Err(CohortError::Covariance(_))
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut cfg = three_feature_config();
        cfg.risk_weights = vec![0.5, 0.1];
        assert!(matches!(
            generate_synthetic_cohort(&cfg),
            Err(CohortError::InvalidConfig(_))
        ));
    }

    #[test]
    fn uniform_assignment_hits_treated_fraction_within_3_sigma() {
        let mut cfg = three_feature_config();
        cfg.n_patients = 20_000;
        cfg.treated_fraction = 0.25;
        let panel = generate_synthetic_cohort(&cfg).unwrap();
        let treated = panel.treated_count() as f64;
        let n = panel.n_patients() as f64;
        let sigma = (n * 0.25 * 0.75).sqrt();
        assert!(
            (treated - 0.25 * n).abs() <= 3.0 * sigma,
            "treated={treated}, expected {}±{}",
            0.25 * n,
            3.0 * sigma
        );
    }

    #[test]
    fn confounded_assignment_preserves_fraction_and_tilts_to_risk() {
        let mut cfg = three_feature_config();
        cfg.n_patients = 20_000;
        cfg.treated_fraction = 0.3;
        cfg.confounding_strength = 400.0;
        let panel = generate_synthetic_cohort(&cfg).unwrap();
        let n = panel.n_patients() as f64;
        let treated = panel.treated_count() as f64;
        let sigma = (n * 0.3 * 0.7).sqrt();
        assert!((treated - 0.3 * n).abs() <= 4.0 * sigma);
        // treated patients should have higher latent risk on average
        let (mut risk_t, mut nt, mut risk_c, mut nc) = (0.0, 0.0, 0.0, 0.0);
        for r in panel.records_in_year(1) {
            let latent = cfg.latent_risk(&r.features[..3]);
            if r.treated {
                risk_t += latent;
                nt += 1.0;
            } else {
                risk_c += latent;
                nc += 1.0;
            }
        }
        assert!(risk_t / nt > risk_c / nc + 0.001);
    }

    #[test]
    fn untreated_onset_rate_matches_analytic_probability() {
        let mut cfg = three_feature_config();
        cfg.n_patients = 100_000;
        let panel = generate_synthetic_cohort(&cfg).unwrap();
        let mut expected = 0.0;
        let mut observed = 0.0;
        let mut n = 0.0;
        for r in panel.records_in_year(1) {
            let latent = cfg.latent_risk(&r.features[..3]);
            expected += cfg.onset_probability(latent);
            observed += if r.onset_next == Some(true) { 1.0 } else { 0.0 };
            n += 1.0;
        }
        assert!(
            (expected / n - observed / n).abs() < 0.01,
            "analytic {} vs empirical {}",
            expected / n,
            observed / n
        );
    }

    #[test]
    fn treated_onset_probability_scaled_by_effect() {
        let mut cfg = three_feature_config();
        cfg.n_patients = 120_000;
        cfg.treated_fraction = 0.5;
        cfg.true_effect = 0.31;
        let panel = generate_synthetic_cohort(&cfg).unwrap();
        let (mut on_t, mut n_t, mut on_c, mut n_c) = (0.0, 0.0, 0.0, 0.0);
        for r in panel.records_in_year(1) {
            let y = if r.onset_next == Some(true) { 1.0 } else { 0.0 };
            if r.treated {
                on_t += y;
                n_t += 1.0;
            } else {
                on_c += y;
                n_c += 1.0;
            }
        }
        let ratio: f64 = (on_t / n_t) / (on_c / n_c);
        assert!((ratio - 0.69).abs() < 0.03, "rate ratio {ratio}");
    }

    #[test]
    fn onset_is_absorbing_in_multiyear_panels() {
        let mut cfg = three_feature_config();
        cfg.horizon = 5;
        cfg.n_patients = 3000;
        let panel = generate_synthetic_cohort(&cfg).unwrap();
        for id in panel.patient_ids() {
            if let Some(obs) = panel.onset_observed_year(id) {
                for year in obs..=panel.horizon() {
                    assert!(panel.record(id, year).is_none(), "{id} has record after onset");
                }
            }
        }
    }

    #[test]
    fn age_column_advances_with_year() {
        let mut cfg = three_feature_config();
        cfg.horizon = 3;
        cfg.n_patients = 50;
        cfg.noise_sd = 0.0; // keep everyone prediabetic for all 3 years
        cfg.risk_weights = vec![0.0, 0.0, 0.0];
        let panel = generate_synthetic_cohort(&cfg).unwrap();
        let id = panel.patient_ids().next().unwrap().clone();
        let a1 = panel.record(&id, 1).unwrap().features[0];
        let a3 = panel.record(&id, 3).unwrap().features[0];
        assert!((a3 - a1 - 2.0).abs() < 1e-12);
    }
}
