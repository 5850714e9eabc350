//! Heterogeneous treatment-effect estimation.
//!
//! The estimator is an honest causal forest: each tree draws a subsample
//! without replacement and splits it into two disjoint halves — S1 grows the
//! split structure (maximizing between-leaf effect heterogeneity), S2 alone
//! provides the per-leaf effect estimates. The effect sign is risk
//! *reduction*: `τ = mean(y | control) − mean(y | treated)`, so a beneficial
//! treatment has a positive effect.
//!
//! A known-effect mode covers settings where the effect comes from prior
//! evidence instead of estimation, optionally decaying exponentially with
//! years on treatment.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Panel;
use crate::learners::tree::{Node, Tree};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum EffectError {
    #[error("panel has no treated units with labels; use a known-effect spec instead")]
    NoTreatedUnits,
    #[error("panel has no untreated units with labels")]
    NoControlUnits,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("effect spec is in forest mode but no fitted forest was supplied")]
    ForestNotFitted,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Forest defaults: 10 trees, 10 candidate features per split, depth 5,
/// at least 100 structure samples and 10 treated estimation samples per leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalForestParams {
    pub n_estimators: usize,
    pub max_features: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub min_treated_per_leaf: usize,
    /// Fraction of the data drawn (without replacement) per tree before the
    /// S1/S2 halving.
    pub subsample_fraction: f64,
    /// Append the record year as an extra feature when fitting from panels,
    /// pooling all years into one forest.
    pub year_feature: bool,
}

impl Default for CausalForestParams {
    fn default() -> Self {
        Self {
            n_estimators: 10,
            max_features: 10,
            max_depth: 5,
            min_samples_leaf: 100,
            min_treated_per_leaf: 10,
            subsample_fraction: 0.5,
            year_feature: true,
        }
    }
}

/// One honest tree: split structure plus the index sets that built it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalTree {
    pub tree: Tree,
    /// Rows (into the training arrays) used for split structure.
    pub structure_rows: Vec<usize>,
    /// Rows used for leaf estimates; disjoint from `structure_rows`.
    pub estimation_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalForest {
    pub trees: Vec<CausalTree>,
    pub params: CausalForestParams,
    pub n_features: usize,
    /// Whether inputs must carry the year as their final component.
    pub expects_year_feature: bool,
}

impl CausalForest {
    /// Average per-tree leaf estimate, clipped to [0, 1] (the effect acts as
    /// a probability multiplier downstream).
    pub fn estimate_cate(&self, x: &[f64]) -> Result<f64, EffectError> {
        Ok(self.estimate_cate_raw(x)?.clamp(0.0, 1.0))
    }

    /// Unclipped average of per-tree estimates.
    pub fn estimate_cate_raw(&self, x: &[f64]) -> Result<f64, EffectError> {
        if x.len() != self.n_features {
            return Err(EffectError::DimensionMismatch { expected: self.n_features, got: x.len() });
        }
        let sum: f64 = self.trees.iter().map(|t| t.tree.predict(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }
}

struct GroupStats {
    n: usize,
    treated: usize,
    control: usize,
    y_treated: f64,
    y_control: f64,
}

impl GroupStats {
    fn collect(rows: &[usize], treated: &[bool], y: &[f64]) -> Self {
        let mut s =
            GroupStats { n: rows.len(), treated: 0, control: 0, y_treated: 0.0, y_control: 0.0 };
        for &r in rows {
            if treated[r] {
                s.treated += 1;
                s.y_treated += y[r];
            } else {
                s.control += 1;
                s.y_control += y[r];
            }
        }
        s
    }

    /// Risk reduction: control mean minus treated mean.
    fn effect(&self) -> Option<f64> {
        if self.treated == 0 || self.control == 0 {
            return None;
        }
        Some(self.y_control / self.control as f64 - self.y_treated / self.treated as f64)
    }
}

struct TreeBuilder<'d> {
    x: &'d Matrix,
    treated: &'d [bool],
    y: &'d [f64],
    params: &'d CausalForestParams,
}

struct CandidateSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl TreeBuilder<'_> {
    /// Best heterogeneity split of a node: maximize `Σ_child n·τ̂²` over S1,
    /// subject to size floors on S1 and estimability floors on S2.
    fn best_split(&self, s1: &[usize], s2: &[usize], features: &[usize]) -> Option<CandidateSplit> {
        let mut best: Option<CandidateSplit> = None;
        let p = self.params;
        let s2_total = GroupStats::collect(s2, self.treated, self.y);
        for &feature in features {
            let mut s1_sorted = s1.to_vec();
            s1_sorted.sort_by(|&a, &b| self.x.get(a, feature).total_cmp(&self.x.get(b, feature)));
            let mut s2_sorted = s2.to_vec();
            s2_sorted.sort_by(|&a, &b| self.x.get(a, feature).total_cmp(&self.x.get(b, feature)));

            let total = GroupStats::collect(s1, self.treated, self.y);
            let (mut n_t, mut n_c, mut y_t, mut y_c) = (0usize, 0usize, 0.0f64, 0.0f64);
            let (mut s2_pos, mut s2_t, mut s2_c) = (0usize, 0usize, 0usize);

            for pos in 0..s1_sorted.len().saturating_sub(1) {
                let r = s1_sorted[pos];
                if self.treated[r] {
                    n_t += 1;
                    y_t += self.y[r];
                } else {
                    n_c += 1;
                    y_c += self.y[r];
                }
                let v = self.x.get(r, feature);
                let v_next = self.x.get(s1_sorted[pos + 1], feature);
                if v == v_next {
                    continue;
                }
                let threshold = 0.5 * (v + v_next);
                let n_l = pos + 1;
                let n_r = s1_sorted.len() - n_l;
                if n_l < p.min_samples_leaf || n_r < p.min_samples_leaf {
                    continue;
                }
                let (rt, rc) = (total.treated - n_t, total.control - n_c);
                if n_t == 0 || n_c == 0 || rt == 0 || rc == 0 {
                    continue;
                }
                while s2_pos < s2_sorted.len()
                    && self.x.get(s2_sorted[s2_pos], feature) <= threshold
                {
                    if self.treated[s2_sorted[s2_pos]] {
                        s2_t += 1;
                    } else {
                        s2_c += 1;
                    }
                    s2_pos += 1;
                }
                let (s2_rt, s2_rc) = (s2_total.treated - s2_t, s2_total.control - s2_c);
                if s2_t < p.min_treated_per_leaf
                    || s2_rt < p.min_treated_per_leaf
                    || s2_c == 0
                    || s2_rc == 0
                {
                    continue;
                }
                let tau_l = y_c / n_c as f64 - y_t / n_t as f64;
                let tau_r =
                    (total.y_control - y_c) / rc as f64 - (total.y_treated - y_t) / rt as f64;
                let score = n_l as f64 * tau_l * tau_l + n_r as f64 * tau_r * tau_r;
                if best.as_ref().map_or(true, |b| score > b.score) {
                    best = Some(CandidateSplit { feature, threshold, score });
                }
            }
        }
        best
    }

    fn grow(
        &self,
        s1: Vec<usize>,
        s2: Vec<usize>,
        depth: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let stats2 = GroupStats::collect(&s2, self.treated, self.y);
        let value = stats2.effect().unwrap_or(0.0);
        if depth >= self.params.max_depth
            || s1.len() < 2 * self.params.min_samples_leaf
            || stats2.treated < 2 * self.params.min_treated_per_leaf
        {
            nodes.push(Node::Leaf { value, n_samples: stats2.n });
            return nodes.len() - 1;
        }
        let m = self.params.max_features.clamp(1, self.x.n_cols());
        let mut features: Vec<usize> = (0..self.x.n_cols()).collect();
        if m < features.len() {
            features.shuffle(rng);
            features.truncate(m);
            features.sort_unstable();
        }
        let Some(split) = self.best_split(&s1, &s2, &features) else {
            nodes.push(Node::Leaf { value, n_samples: stats2.n });
            return nodes.len() - 1;
        };
        let partition = |rows: &[usize]| {
            let mut left = Vec::new();
            let mut right = Vec::new();
            for &r in rows {
                if self.x.get(r, split.feature) <= split.threshold {
                    left.push(r);
                } else {
                    right.push(r);
                }
            }
            (left, right)
        };
        let (s1_l, s1_r) = partition(&s1);
        let (s2_l, s2_r) = partition(&s2);
        let id = nodes.len();
        nodes.push(Node::Leaf { value, n_samples: stats2.n }); // placeholder
        let left = self.grow(s1_l, s2_l, depth + 1, rng, nodes);
        let right = self.grow(s1_r, s2_r, depth + 1, rng, nodes);
        nodes[id] = Node::Split { feature: split.feature, threshold: split.threshold, left, right };
        id
    }
}

/// Fit an honest causal forest from explicit arrays. `y` holds outcome
/// labels as 0/1, `treated` the observational treatment flags.
pub fn fit_causal_forest_arrays(
    x: &Matrix,
    treated: &[bool],
    y: &[f64],
    params: &CausalForestParams,
    seed: u64,
) -> Result<CausalForest, EffectError> {
    if x.n_rows() != treated.len() || x.n_rows() != y.len() {
        return Err(EffectError::DimensionMismatch {
            expected: x.n_rows(),
            got: treated.len().min(y.len()),
        });
    }
    if !treated.iter().any(|&t| t) {
        return Err(EffectError::NoTreatedUnits);
    }
    if !treated.iter().any(|&t| !t) {
        return Err(EffectError::NoControlUnits);
    }
    if !(params.subsample_fraction > 0.0 && params.subsample_fraction <= 1.0) {
        return Err(EffectError::InvalidParam("subsample_fraction must lie in (0, 1]".into()));
    }

    let n = x.n_rows();
    let seeds: Vec<u64> = (0..params.n_estimators).map(|t| derive_seed(seed, t as u64)).collect();
    let trees: Vec<CausalTree> = seeds
        .par_iter()
        .map(|&tree_seed| {
            let mut rng = rng_from_seed(tree_seed);
            // Subsample without replacement, then halve into disjoint S1/S2.
            let mut pool: Vec<usize> = (0..n).collect();
            pool.shuffle(&mut rng);
            let take = ((n as f64 * params.subsample_fraction).round() as usize).clamp(2, n);
            pool.truncate(take);
            let half = take / 2;
            let mut s1: Vec<usize> = pool[..half].to_vec();
            let mut s2: Vec<usize> = pool[half..].to_vec();
            s1.sort_unstable();
            s2.sort_unstable();

            let builder = TreeBuilder { x, treated, y, params };
            let mut nodes = Vec::new();
            builder.grow(s1.clone(), s2.clone(), 0, &mut rng, &mut nodes);
            CausalTree { tree: Tree::from_nodes(nodes), structure_rows: s1, estimation_rows: s2 }
        })
        .collect();

    Ok(CausalForest {
        trees,
        params: params.clone(),
        n_features: x.n_cols(),
        expects_year_feature: false,
    })
}

/// Fit the forest from a panel's labeled records, using the data-recorded
/// treatment flags. With `params.year_feature` the record year is appended
/// as the final input column (one pooled forest across years).
pub fn fit_causal_forest(
    panel: &Panel,
    params: &CausalForestParams,
    seed: u64,
) -> Result<CausalForest, EffectError> {
    fit_causal_forest_history(panel, params, None, seed)
}

/// Like [`fit_causal_forest`] but restricted to records with
/// `year < history_before` for dynamic evaluation.
pub fn fit_causal_forest_history(
    panel: &Panel,
    params: &CausalForestParams,
    history_before: Option<u32>,
    seed: u64,
) -> Result<CausalForest, EffectError> {
    let mut rows = Vec::new();
    let mut treated = Vec::new();
    let mut y = Vec::new();
    for r in panel.records() {
        if let Some(cut) = history_before {
            if r.year >= cut {
                continue;
            }
        }
        let Some(onset) = r.onset_next else { continue };
        let mut features = r.features.clone();
        if params.year_feature {
            features.push(r.year as f64);
        }
        rows.push(features);
        treated.push(r.treated);
        y.push(if onset { 1.0 } else { 0.0 });
    }
    if rows.is_empty() {
        return Err(EffectError::NoControlUnits);
    }
    let x = Matrix::from_rows(&rows);
    let mut forest = fit_causal_forest_arrays(&x, &treated, &y, params, seed)?;
    forest.expects_year_feature = params.year_feature;
    Ok(forest)
}

/// How treatment effects enter the decision model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMode {
    /// Estimate from data with the causal forest.
    Forest,
    /// Effect known up front (e.g. from a trial).
    Known,
}

/// Effect source specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectSpec {
    pub mode: EffectMode,
    /// Known effect in [0, 1]; ignored in forest mode.
    #[serde(default)]
    pub known_gamma: f64,
    /// Exponential decay with years on treatment (known mode only).
    #[serde(default)]
    pub decay: bool,
    /// Program start year, carried for bookkeeping.
    #[serde(default = "default_start_year")]
    pub start_year: u32,
}

fn default_start_year() -> u32 {
    1
}

impl EffectSpec {
    pub fn forest() -> Self {
        Self { mode: EffectMode::Forest, known_gamma: 0.0, decay: false, start_year: 1 }
    }

    pub fn known(gamma: f64, decay: bool) -> Self {
        Self { mode: EffectMode::Known, known_gamma: gamma, decay, start_year: 1 }
    }

    pub fn validate(&self) -> Result<(), EffectError> {
        if !(0.0..=1.0).contains(&self.known_gamma) {
            return Err(EffectError::InvalidParam("known_gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Treatment effect `γ` for a patient `years_since_start` years after
/// enrollment: the known effect (with optional exponential decay), or the
/// forest estimate clipped to [0, 1].
pub fn effect_at(
    spec: &EffectSpec,
    forest: Option<&CausalForest>,
    x: &[f64],
    years_since_start: u32,
) -> Result<f64, EffectError> {
    match spec.mode {
        EffectMode::Known => {
            if spec.decay {
                Ok(spec.known_gamma * (-(years_since_start as f64)).exp())
            } else {
                Ok(spec.known_gamma)
            }
        }
        EffectMode::Forest => {
            let forest = forest.ok_or(EffectError::ForestNotFitted)?;
            forest.estimate_cate(x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::rng_from_seed;

    /// Additive-effect DGP: p0(x) = 0.5 + 0.4 (x0 − 0.5), p1 = p0 − τ(x),
    /// randomized 50/50 treatment.
    fn additive_dgp(
        n: usize,
        tau: impl Fn(&[f64]) -> f64,
        seed: u64,
    ) -> (Matrix, Vec<bool>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let mut rows = Vec::with_capacity(n);
        let mut treated = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            let t = rng.gen::<bool>();
            let p0 = 0.5 + 0.4 * (x[0] - 0.5);
            let p = if t { (p0 - tau(&x)).clamp(0.0, 1.0) } else { p0 };
            treated.push(t);
            y.push(if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
            rows.push(x);
        }
        (Matrix::from_rows(&rows), treated, y)
    }

    #[test]
    fn constant_effect_recovered_within_tolerance() {
        let (x, t, y) = additive_dgp(5000, |_| 0.3, 11);
        let forest =
            fit_causal_forest_arrays(&x, &t, &y, &CausalForestParams::default(), 1).unwrap();
        let mean: f64 = (0..x.n_rows())
            .map(|i| forest.estimate_cate(x.row(i)).unwrap())
            .sum::<f64>()
            / x.n_rows() as f64;
        assert!((mean - 0.3).abs() < 0.05, "mean CATE {mean}");
    }

    #[test]
    fn null_effect_estimates_stay_near_zero() {
        let (x, t, y) = additive_dgp(5000, |_| 0.0, 13);
        let forest =
            fit_causal_forest_arrays(&x, &t, &y, &CausalForestParams::default(), 2).unwrap();
        let mean_abs: f64 = (0..x.n_rows())
            .map(|i| forest.estimate_cate(x.row(i)).unwrap().abs())
            .sum::<f64>()
            / x.n_rows() as f64;
        assert!(mean_abs <= 0.03, "mean |CATE| {mean_abs}");
    }

    #[test]
    fn heterogeneous_effect_groups_separate() {
        let (x, t, y) = additive_dgp(8000, |x| if x[0] > 0.5 { 0.4 } else { 0.0 }, 17);
        let forest =
            fit_causal_forest_arrays(&x, &t, &y, &CausalForestParams::default(), 3).unwrap();
        let (mut hi, mut nhi, mut lo, mut nlo) = (0.0, 0.0f64, 0.0, 0.0f64);
        for i in 0..x.n_rows() {
            let est = forest.estimate_cate(x.row(i)).unwrap();
            if x.get(i, 0) > 0.5 {
                hi += est;
                nhi += 1.0;
            } else {
                lo += est;
                nlo += 1.0;
            }
        }
        let gap = hi / nhi - lo / nlo;
        assert!((gap - 0.4).abs() < 0.1, "group gap {gap}");
    }

    #[test]
    fn honesty_structure_and_estimation_rows_are_disjoint() {
        let (x, t, y) = additive_dgp(2000, |_| 0.2, 23);
        let forest =
            fit_causal_forest_arrays(&x, &t, &y, &CausalForestParams::default(), 4).unwrap();
        for tree in &forest.trees {
            let s1: std::collections::BTreeSet<_> = tree.structure_rows.iter().collect();
            assert!(tree.estimation_rows.iter().all(|r| !s1.contains(r)));
        }
    }

    #[test]
    fn permuted_treatment_labels_kill_the_signal() {
        let (x, t, y) = additive_dgp(5000, |_| 0.3, 29);
        // Destroy the treatment-outcome link by shifting assignments.
        let mut t_perm = t.clone();
        t_perm.rotate_right(1234);
        let forest =
            fit_causal_forest_arrays(&x, &t_perm, &y, &CausalForestParams::default(), 5).unwrap();
        let mean_abs: f64 = (0..x.n_rows())
            .map(|i| forest.estimate_cate(x.row(i)).unwrap().abs())
            .sum::<f64>()
            / x.n_rows() as f64;
        assert!(mean_abs < 0.05, "mean |CATE| after permutation {mean_abs}");
    }

    #[test]
    fn estimates_invariant_to_tree_order() {
        let (x, t, y) = additive_dgp(2000, |_| 0.25, 31);
        let forest =
            fit_causal_forest_arrays(&x, &t, &y, &CausalForestParams::default(), 6).unwrap();
        let mut reordered = forest.clone();
        reordered.trees.reverse();
        for i in (0..x.n_rows()).step_by(97) {
            let a = forest.estimate_cate(x.row(i)).unwrap();
            let b = reordered.estimate_cate(x.row(i)).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_tree_returns_its_leaf_value_and_clips() {
        let make = |value: f64| CausalForest {
            trees: vec![CausalTree {
                tree: Tree::leaf(value, 10),
                structure_rows: vec![],
                estimation_rows: vec![],
            }],
            params: CausalForestParams::default(),
            n_features: 2,
            expects_year_feature: false,
        };
        assert_eq!(make(0.2).estimate_cate(&[0.0, 0.0]).unwrap(), 0.2);
        assert_eq!(make(-0.05).estimate_cate(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(make(1.2).estimate_cate(&[0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn known_mode_decay_schedule() {
        let spec = EffectSpec::known(0.58, false);
        assert_eq!(effect_at(&spec, None, &[], 0).unwrap(), 0.58);
        assert_eq!(effect_at(&spec, None, &[], 3).unwrap(), 0.58);

        let decayed = EffectSpec::known(0.58, true);
        assert_eq!(effect_at(&decayed, None, &[], 0).unwrap(), 0.58);
        let one_year = effect_at(&decayed, None, &[], 1).unwrap();
        assert!((one_year - 0.21337).abs() < 1e-4, "{one_year}");

        let zero = EffectSpec::known(0.0, true);
        assert_eq!(effect_at(&zero, None, &[], 5).unwrap(), 0.0);
    }

    #[test]
    fn forest_mode_requires_fitted_forest() {
        let spec = EffectSpec::forest();
        assert!(matches!(effect_at(&spec, None, &[0.0], 0), Err(EffectError::ForestNotFitted)));
    }

    #[test]
    fn all_treated_rejected() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]);
        assert!(matches!(
            fit_causal_forest_arrays(
                &x,
                &[true, true],
                &[0.0, 1.0],
                &CausalForestParams::default(),
                0
            ),
            Err(EffectError::NoControlUnits)
        ));
        assert!(matches!(
            fit_causal_forest_arrays(
                &x,
                &[false, false],
                &[0.0, 1.0],
                &CausalForestParams::default(),
                0
            ),
            Err(EffectError::NoTreatedUnits)
        ));
    }

    #[test]
    fn panel_fit_appends_year_feature() {
        use crate::cohort::{generate_synthetic_cohort, GenConfig};
        let cfg = GenConfig {
            n_patients: 1500,
            horizon: 2,
            feature_mean: vec![50.0, 170.0, 27.0],
            feature_cov: vec![
                vec![20.0, 0.0, 5.0],
                vec![0.0, 50.0, 5.0],
                vec![5.0, 5.0, 5.0],
            ],
            risk_weights: vec![0.5, -0.2, 0.3],
            risk_scale: 3.0,
            onset_threshold: 0.55,
            noise_sd: 0.15,
            true_effect: 0.4,
            treated_fraction: 0.5,
            confounding_strength: 0.0,
            seed: 77,
            core_names: None,
            binary_features: vec![],
            noise_groups: vec![],
            effect_heterogeneity: None,
            glucose_feature: false,
        };
        let panel = generate_synthetic_cohort(&cfg).unwrap();
        let params = CausalForestParams { min_samples_leaf: 50, ..CausalForestParams::default() };
        let forest = fit_causal_forest(&panel, &params, 8).unwrap();
        assert!(forest.expects_year_feature);
        assert_eq!(forest.n_features, 4);
        let r = panel.records_in_year(1).next().unwrap();
        let mut x = r.features.clone();
        x.push(1.0);
        let est = forest.estimate_cate(&x).unwrap();
        assert!((0.0..=1.0).contains(&est));
    }
}
