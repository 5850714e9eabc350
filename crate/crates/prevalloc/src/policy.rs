//! Allocation policies under an annual budget of `k` enrollments.
//!
//! The decision-model policy ranks eligible patients by expected risk
//! reduction `γ·h` and takes the top k — by the exchange argument this
//! minimizes the expected number of onsets among all feasible allocations,
//! which the brute-force enumerator here cross-checks exactly. Baselines:
//! the clinical charting score with a threshold rule, top-k by risk alone,
//! and uniform random choice.
//!
//! All tie-breaking is a seeded uniform draw rather than id order, so no
//! patient is systematically favored; determinism comes from the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{columns, CohortError, FeatureLayout, PatientId, PatientRecord};
use crate::rng::rng_from_seed;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("risk and effect maps have different key sets")]
    KeyMismatch,
    #[error("instance with {n} patients exceeds the enumeration guard ({max})")]
    InstanceTooLarge { n: usize, max: usize },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("allocation i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// mg/dL per mmol/L for glucose.
pub const GLUCOSE_MGDL_PER_MMOL: f64 = 18.016;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Male,
    Female,
}

/// Inputs for the Framingham diabetes risk charting score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FraminghamInputs {
    pub fasting_glucose_mgdl: f64,
    pub bmi: f64,
    pub hdl_mgdl: f64,
    pub sex: Sex,
    pub parental_history: bool,
    pub triglycerides_mgdl: f64,
    pub systolic: f64,
    pub diastolic: f64,
    pub on_bp_treatment: bool,
}

impl FraminghamInputs {
    /// Read the charting inputs from a panel record via named layout
    /// columns; glucose comes from the record's mmol/L field.
    pub fn from_record(record: &PatientRecord, layout: &FeatureLayout) -> Result<Self, CohortError> {
        let get = |name: &str| layout.require(name).map(|i| record.features[i]);
        Ok(Self {
            fasting_glucose_mgdl: record.fasting_glucose * GLUCOSE_MGDL_PER_MMOL,
            bmi: get(columns::BMI)?,
            hdl_mgdl: get(columns::HDL)?,
            sex: if get(columns::SEX)? >= 0.5 { Sex::Female } else { Sex::Male },
            parental_history: get(columns::PARENTAL_HISTORY)? >= 0.5,
            triglycerides_mgdl: get(columns::TRIGLYCERIDES)?,
            systolic: get(columns::SYSTOLIC_BP)?,
            diastolic: get(columns::DIASTOLIC_BP)?,
            on_bp_treatment: get(columns::ON_BP_TREATMENT)? >= 0.5,
        })
    }
}

/// Framingham diabetes risk score: additive charting over seven risk
/// factors. Range 0..=28.
pub fn framingham_score(inp: &FraminghamInputs) -> u32 {
    let mut score = 0;
    if inp.fasting_glucose_mgdl >= 100.0 && inp.fasting_glucose_mgdl < 126.0 {
        score += 10;
    }
    if inp.bmi >= 25.0 && inp.bmi <= 29.9 {
        score += 2;
    }
    if inp.bmi >= 30.0 {
        score += 5;
    }
    let hdl_cut = match inp.sex {
        Sex::Male => 40.0,
        Sex::Female => 50.0,
    };
    if inp.hdl_mgdl < hdl_cut {
        score += 5;
    }
    if inp.parental_history {
        score += 3;
    }
    if inp.triglycerides_mgdl >= 150.0 {
        score += 3;
    }
    if inp.systolic >= 130.0 || inp.diastolic >= 85.0 || inp.on_bp_treatment {
        score += 2;
    }
    score
}

/// One year's policy output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selected: BTreeSet<PatientId>,
    /// Realized enrollment threshold: the lowest selected score (the k-th
    /// order statistic), when anyone was selected.
    pub threshold: Option<f64>,
    /// Set when the budget exceeded the candidate pool and everyone was
    /// taken.
    pub budget_exceeded_pool: bool,
}

/// Rank candidates by score with seeded uniform tie-breaking and take the
/// top k. Shared engine behind the score-threshold, risk-only, and
/// risk-reduction policies.
fn top_k_by_score(scores: &BTreeMap<PatientId, f64>, k: usize, tie_break_seed: u64) -> Selection {
    let mut rng = rng_from_seed(tie_break_seed);
    // Draws happen in sorted-id order, so the ranking is reproducible.
    let mut ranked: Vec<(&PatientId, f64, f64)> =
        scores.iter().map(|(id, &s)| (id, s, rng.gen::<f64>())).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(b.0)));
    let take = k.min(ranked.len());
    let selected: BTreeSet<PatientId> =
        ranked[..take].iter().map(|(id, _, _)| (*id).clone()).collect();
    let truncated = k > ranked.len();
    if truncated {
        log::warn!("budget {k} exceeds candidate pool of {}; selecting everyone", ranked.len());
    }
    Selection {
        threshold: (take > 0).then(|| ranked[take - 1].1),
        selected,
        budget_exceeded_pool: truncated,
    }
}

/// Clinical baseline: enroll the k highest charting scores; the threshold ψ
/// is realized as the k-th order statistic.
pub fn threshold_policy(
    scores: &BTreeMap<PatientId, f64>,
    k: usize,
    tie_break_seed: u64,
) -> Selection {
    top_k_by_score(scores, k, tie_break_seed)
}

/// Decision-model policy: the k patients with the largest expected risk
/// reduction `γ·h`. Every selected patient's reduction weakly dominates
/// every excluded patient's.
pub fn select_topk(
    risks: &BTreeMap<PatientId, f64>,
    gammas: &BTreeMap<PatientId, f64>,
    k: usize,
    tie_break_seed: u64,
) -> Result<Selection, PolicyError> {
    if risks.len() != gammas.len() || !risks.keys().all(|id| gammas.contains_key(id)) {
        return Err(PolicyError::KeyMismatch);
    }
    let reductions: BTreeMap<PatientId, f64> =
        risks.iter().map(|(id, &h)| (id.clone(), gammas[id] * h)).collect();
    Ok(top_k_by_score(&reductions, k, tie_break_seed))
}

/// Risk-stratified baseline: top k by onset risk alone.
pub fn risk_only_policy(
    risks: &BTreeMap<PatientId, f64>,
    k: usize,
    tie_break_seed: u64,
) -> Selection {
    top_k_by_score(risks, k, tie_break_seed)
}

/// Naive baseline: uniform sample of k patients without replacement.
pub fn random_policy(eligible: &BTreeSet<PatientId>, k: usize, seed: u64) -> Selection {
    use rand::seq::SliceRandom;
    let mut pool: Vec<&PatientId> = eligible.iter().collect();
    let mut rng = rng_from_seed(seed);
    pool.shuffle(&mut rng);
    let take = k.min(pool.len());
    Selection {
        selected: pool[..take].iter().map(|id| (*id).clone()).collect(),
        threshold: None,
        budget_exceeded_pool: k > pool.len(),
    }
}

/// Single-year expected-onset objective: `Σ_treated (1−γ)h + Σ_untreated h`.
pub fn allocation_objective(
    risks: &BTreeMap<PatientId, f64>,
    gammas: &BTreeMap<PatientId, f64>,
    selected: &BTreeSet<PatientId>,
) -> f64 {
    risks
        .iter()
        .map(|(id, &h)| if selected.contains(id) { (1.0 - gammas[id]) * h } else { h })
        .sum()
}

const BRUTE_FORCE_MAX: usize = 20;

/// Enumeration oracle: the subset of size ≤ k minimizing the expected-onset
/// objective, with its objective value. Guarded to 20 patients.
pub fn brute_force_allocation(
    risks: &BTreeMap<PatientId, f64>,
    gammas: &BTreeMap<PatientId, f64>,
    k: usize,
) -> Result<(BTreeSet<PatientId>, f64), PolicyError> {
    if risks.len() != gammas.len() || !risks.keys().all(|id| gammas.contains_key(id)) {
        return Err(PolicyError::KeyMismatch);
    }
    let n = risks.len();
    if n > BRUTE_FORCE_MAX {
        return Err(PolicyError::InstanceTooLarge { n, max: BRUTE_FORCE_MAX });
    }
    let ids: Vec<&PatientId> = risks.keys().collect();
    let mut best: Option<(BTreeSet<PatientId>, f64)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize > k {
            continue;
        }
        let subset: BTreeSet<PatientId> =
            (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ids[i].clone()).collect();
        let obj = allocation_objective(risks, gammas, &subset);
        if best.as_ref().map_or(true, |(_, b)| obj < *b) {
            best = Some((subset, obj));
        }
    }
    Ok(best.expect("at least the empty subset"))
}

/// Multi-year treatment assignments under a per-year budget. Only positive
/// assignments are stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    assignments: BTreeSet<(PatientId, u32)>,
    pub budget_per_year: usize,
}

impl AllocationPlan {
    pub fn new(budget_per_year: usize) -> Self {
        Self { assignments: BTreeSet::new(), budget_per_year }
    }

    pub fn assign(&mut self, id: PatientId, year: u32) {
        self.assignments.insert((id, year));
    }

    pub fn is_treated(&self, id: &PatientId, year: u32) -> bool {
        self.assignments.contains(&(id.clone(), year))
    }

    pub fn treated_in_year(&self, year: u32) -> impl Iterator<Item = &PatientId> {
        self.assignments.iter().filter(move |(_, y)| *y == year).map(|(id, _)| id)
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Budget feasibility: no year may exceed `budget_per_year` assignments.
    pub fn validate_budget(&self) -> Result<(), String> {
        let mut per_year: BTreeMap<u32, usize> = BTreeMap::new();
        for (_, year) in &self.assignments {
            *per_year.entry(*year).or_default() += 1;
        }
        for (year, count) in per_year {
            if count > self.budget_per_year {
                return Err(format!(
                    "year {year} has {count} assignments, budget is {}",
                    self.budget_per_year
                ));
            }
        }
        Ok(())
    }

    /// CSV export: `patient_id,year,treated` rows for every assignment.
    pub fn save_csv(&self, path: &Path) -> Result<(), PolicyError> {
        let mut out = String::from("patient_id,year,treated\n");
        for (id, year) in &self.assignments {
            out.push_str(&format!("{id},{year},1\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<PatientId, f64> {
        pairs.iter().map(|(id, v)| (PatientId::from(*id), *v)).collect()
    }

    fn ids(names: &[&str]) -> BTreeSet<PatientId> {
        names.iter().map(|n| PatientId::from(*n)).collect()
    }

    #[test]
    fn framingham_worked_example_sums_to_23() {
        let inp = FraminghamInputs {
            fasting_glucose_mgdl: 110.0,
            bmi: 31.0,
            hdl_mgdl: 55.0,
            sex: Sex::Female,
            parental_history: true,
            triglycerides_mgdl: 160.0,
            systolic: 135.0,
            diastolic: 80.0,
            on_bp_treatment: false,
        };
        assert_eq!(framingham_score(&inp), 23);
    }

    fn no_risk_factors() -> FraminghamInputs {
        FraminghamInputs {
            fasting_glucose_mgdl: 90.0,
            bmi: 22.0,
            hdl_mgdl: 60.0,
            sex: Sex::Male,
            parental_history: false,
            triglycerides_mgdl: 100.0,
            systolic: 110.0,
            diastolic: 70.0,
            on_bp_treatment: false,
        }
    }

    #[test]
    fn framingham_all_absent_is_zero_and_single_factors_toggle() {
        let base = no_risk_factors();
        assert_eq!(framingham_score(&base), 0);

        let cases: Vec<(Box<dyn Fn(&mut FraminghamInputs)>, u32)> = vec![
            (Box::new(|i: &mut FraminghamInputs| i.fasting_glucose_mgdl = 110.0), 10),
            (Box::new(|i: &mut FraminghamInputs| i.bmi = 27.0), 2),
            (Box::new(|i: &mut FraminghamInputs| i.bmi = 30.0), 5),
            (Box::new(|i: &mut FraminghamInputs| i.hdl_mgdl = 39.0), 5),
            (Box::new(|i: &mut FraminghamInputs| i.parental_history = true), 3),
            (Box::new(|i: &mut FraminghamInputs| i.triglycerides_mgdl = 150.0), 3),
            (Box::new(|i: &mut FraminghamInputs| i.systolic = 130.0), 2),
            (Box::new(|i: &mut FraminghamInputs| i.diastolic = 85.0), 2),
            (Box::new(|i: &mut FraminghamInputs| i.on_bp_treatment = true), 2),
        ];
        for (mutate, expected) in cases {
            let mut inp = no_risk_factors();
            mutate(&mut inp);
            assert_eq!(framingham_score(&inp), expected);
        }
        // HDL cut is sex-specific: 45 mg/dL scores for women, not for men.
        let mut woman = no_risk_factors();
        woman.sex = Sex::Female;
        woman.hdl_mgdl = 45.0;
        assert_eq!(framingham_score(&woman), 5);
        let mut man = no_risk_factors();
        man.hdl_mgdl = 45.0;
        assert_eq!(framingham_score(&man), 0);
    }

    #[test]
    fn framingham_range_is_bounded() {
        let maxed = FraminghamInputs {
            fasting_glucose_mgdl: 110.0,
            bmi: 35.0,
            hdl_mgdl: 10.0,
            sex: Sex::Male,
            parental_history: true,
            triglycerides_mgdl: 300.0,
            systolic: 180.0,
            diastolic: 110.0,
            on_bp_treatment: true,
        };
        assert_eq!(framingham_score(&maxed), 28);
    }

    #[test]
    fn threshold_policy_takes_top_scores() {
        let scores = map(&[("A", 23.0), ("B", 5.0), ("C", 10.0)]);
        let sel = threshold_policy(&scores, 2, 0);
        assert_eq!(sel.selected, ids(&["A", "C"]));
        assert_eq!(sel.threshold, Some(10.0));
        assert!(!sel.budget_exceeded_pool);
    }

    #[test]
    fn threshold_policy_zero_budget_and_overflow() {
        let scores = map(&[("A", 1.0), ("B", 2.0)]);
        assert!(threshold_policy(&scores, 0, 0).selected.is_empty());
        let all = threshold_policy(&scores, 5, 0);
        assert_eq!(all.selected.len(), 2);
        assert!(all.budget_exceeded_pool);
    }

    #[test]
    fn tie_break_is_seeded_and_deterministic() {
        let scores = map(&[("A", 1.0), ("B", 1.0), ("C", 1.0)]);
        let first = threshold_policy(&scores, 1, 42);
        for _ in 0..5 {
            assert_eq!(threshold_policy(&scores, 1, 42), first);
        }
        // Across seeds, every patient gets picked eventually.
        let picks: BTreeSet<PatientId> =
            (0..50).flat_map(|s| threshold_policy(&scores, 1, s).selected).collect();
        assert_eq!(picks.len(), 3, "ties should not systematically favor one id");
    }

    #[test]
    fn select_topk_ranks_by_risk_reduction() {
        let risks = map(&[("A", 0.9), ("B", 0.5), ("C", 0.2)]);
        let gammas = map(&[("A", 0.1), ("B", 0.5), ("C", 0.9)]);
        // reductions: A 0.09, B 0.25, C 0.18
        let sel = select_topk(&risks, &gammas, 1, 0).unwrap();
        assert_eq!(sel.selected, ids(&["B"]));
    }

    #[test]
    fn select_topk_constant_gamma_reduces_to_risk_ranking() {
        let risks = map(&[("A", 0.9), ("B", 0.5), ("C", 0.2)]);
        let gammas = map(&[("A", 0.4), ("B", 0.4), ("C", 0.4)]);
        let ours = select_topk(&risks, &gammas, 2, 7).unwrap();
        let risk_only = risk_only_policy(&risks, 2, 7);
        assert_eq!(ours.selected, risk_only.selected);
    }

    #[test]
    fn select_topk_full_budget_takes_everyone() {
        let risks = map(&[("A", 0.9), ("B", 0.5)]);
        let gammas = map(&[("A", 0.1), ("B", 0.5)]);
        let sel = select_topk(&risks, &gammas, 2, 0).unwrap();
        assert_eq!(sel.selected.len(), 2);
    }

    #[test]
    fn select_topk_key_mismatch_rejected() {
        let risks = map(&[("A", 0.9)]);
        let gammas = map(&[("B", 0.5)]);
        assert!(matches!(select_topk(&risks, &gammas, 1, 0), Err(PolicyError::KeyMismatch)));
    }

    #[test]
    fn brute_force_matches_hand_computed_objective() {
        let risks = map(&[("A", 0.9), ("B", 0.5), ("C", 0.2)]);
        let gammas = map(&[("A", 0.1), ("B", 0.5), ("C", 0.9)]);
        let (set, obj) = brute_force_allocation(&risks, &gammas, 1).unwrap();
        assert_eq!(set, ids(&["B"]));
        assert!((obj - 1.35).abs() < 1e-12);

        let (_, obj0) = brute_force_allocation(&risks, &gammas, 0).unwrap();
        assert!((obj0 - 1.6).abs() < 1e-12);
    }

    #[test]
    fn brute_force_guard_rejects_large_instances() {
        let risks: BTreeMap<PatientId, f64> =
            (0..21).map(|i| (PatientId::new(format!("p{i}")), 0.5)).collect();
        let gammas = risks.clone();
        assert!(matches!(
            brute_force_allocation(&risks, &gammas, 3),
            Err(PolicyError::InstanceTooLarge { n: 21, .. })
        ));
    }

    #[test]
    fn topk_objective_equals_brute_force_on_random_instances() {
        let mut rng = crate::rng::rng_from_seed(99);
        for trial in 0..200 {
            let n = rng.gen_range(1..=12);
            let k = rng.gen_range(0..=4usize.min(n));
            let mut risks = BTreeMap::new();
            let mut gammas = BTreeMap::new();
            for i in 0..n {
                let id = PatientId::new(format!("p{i:02}"));
                risks.insert(id.clone(), rng.gen::<f64>());
                gammas.insert(id, rng.gen::<f64>());
            }
            let sel = select_topk(&risks, &gammas, k, trial as u64).unwrap();
            let ours = allocation_objective(&risks, &gammas, &sel.selected);
            let (_, best) = brute_force_allocation(&risks, &gammas, k).unwrap();
            assert!((ours - best).abs() < 1e-12, "trial {trial}: ours {ours}, brute force {best}");
        }
    }

    #[test]
    fn scaling_reductions_leaves_selection_unchanged() {
        let risks = map(&[("A", 0.7), ("B", 0.4), ("C", 0.9), ("D", 0.1)]);
        let gammas = map(&[("A", 0.3), ("B", 0.8), ("C", 0.2), ("D", 0.9)]);
        let base = select_topk(&risks, &gammas, 2, 5).unwrap();
        let scaled_gammas: BTreeMap<PatientId, f64> =
            gammas.iter().map(|(id, g)| (id.clone(), g * 0.5)).collect();
        let scaled = select_topk(&risks, &scaled_gammas, 2, 5).unwrap();
        assert_eq!(base.selected, scaled.selected);
    }

    #[test]
    fn random_policy_bounds_and_determinism() {
        let pool = ids(&["A", "B", "C", "D"]);
        assert_eq!(random_policy(&pool, 4, 0).selected, pool);
        assert_eq!(random_policy(&pool, 9, 0).selected, pool);
        assert!(random_policy(&pool, 0, 0).selected.is_empty());
        assert_eq!(random_policy(&pool, 2, 3).selected, random_policy(&pool, 2, 3).selected);
    }

    #[test]
    fn allocation_plan_budget_validation() {
        let mut plan = AllocationPlan::new(2);
        plan.assign("A".into(), 1);
        plan.assign("B".into(), 1);
        assert!(plan.validate_budget().is_ok());
        plan.assign("C".into(), 1);
        assert!(plan.validate_budget().is_err());
    }

    #[test]
    fn allocation_plan_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = AllocationPlan::new(10);
        plan.assign("b".into(), 2);
        plan.assign("a".into(), 1);
        let path = dir.path().join("plan.csv");
        plan.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "patient_id,year,treated\na,1,1\nb,2,1\n");
    }
}
