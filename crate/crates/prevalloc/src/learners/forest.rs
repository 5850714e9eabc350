//! Bagged random forest for binary classification with out-of-bag tracking.
//!
//! Trees fit in parallel but each consumes its own derived seed, so the
//! model is identical regardless of thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{fit_classification_tree, ClassTreeParams, FeatureSubsample, SplitCriterion, Tree};
use super::{class_weights, ClassWeight, LearnerError};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_samples_split: usize,
    pub max_features: FeatureSubsample,
    pub criterion: SplitCriterion,
    pub class_weight: ClassWeight,
    /// Sample rows with replacement per tree; `false` trains every tree on
    /// the full sample (useful for the degenerate single-tree case).
    pub bootstrap: bool,
    #[serde(default)]
    pub max_depth: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            min_samples_split: 2,
            max_features: FeatureSubsample::Sqrt,
            criterion: SplitCriterion::Gini,
            class_weight: ClassWeight::Balanced,
            bootstrap: true,
            max_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForestModel {
    pub trees: Vec<Tree>,
    pub params: ForestParams,
    pub n_features: usize,
    /// Out-of-bag probability per training row; `None` when a row was in
    /// every bag.
    pub oob_predictions: Vec<Option<f64>>,
}

impl RandomForestModel {
    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, LearnerError> {
        if x.len() != self.n_features {
            return Err(LearnerError::DimensionMismatch { expected: self.n_features, got: x.len() });
        }
        let mean = self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64;
        Ok(mean.clamp(1e-12, 1.0 - 1e-12))
    }

    /// Misclassification rate of the out-of-bag predictions against `y`.
    pub fn oob_error(&self, y: &[bool]) -> Option<f64> {
        let mut wrong = 0usize;
        let mut total = 0usize;
        for (pred, &label) in self.oob_predictions.iter().zip(y) {
            if let Some(p) = pred {
                total += 1;
                if (*p > 0.5) != label {
                    wrong += 1;
                }
            }
        }
        (total > 0).then(|| wrong as f64 / total as f64)
    }
}

pub fn fit_random_forest(
    x: &Matrix,
    y: &[bool],
    params: &ForestParams,
    seed: u64,
) -> Result<RandomForestModel, LearnerError> {
    if x.n_rows() != y.len() {
        return Err(LearnerError::DimensionMismatch { expected: x.n_rows(), got: y.len() });
    }
    if x.n_rows() == 0 {
        return Err(LearnerError::EmptyData);
    }
    if !x.has_only_finite() {
        return Err(LearnerError::NonFinite);
    }
    let n_pos = y.iter().filter(|&&v| v).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(LearnerError::DegenerateLabels);
    }

    let weights = class_weights(y, params.class_weight);
    let tree_params = ClassTreeParams {
        criterion: params.criterion,
        min_samples_split: params.min_samples_split,
        max_features: params.max_features,
        max_depth: params.max_depth,
    };
    let n = x.n_rows();
    let seeds: Vec<u64> = (0..params.n_trees).map(|t| derive_seed(seed, t as u64)).collect();
    let fitted: Vec<(Tree, Vec<usize>)> = seeds
        .par_iter()
        .map(|&tree_seed| {
            let mut rng = rng_from_seed(tree_seed);
            let rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut in_bag = vec![false; n];
            for &r in &rows {
                in_bag[r] = true;
            }
            let oob: Vec<usize> = (0..n).filter(|&r| !in_bag[r]).collect();
            let tree = fit_classification_tree(x, y, &weights, &rows, &tree_params, &mut rng);
            (tree, oob)
        })
        .collect();

    let mut oob_sum = vec![0.0; n];
    let mut oob_count = vec![0usize; n];
    for (tree, oob) in &fitted {
        for &r in oob {
            oob_sum[r] += tree.predict(x.row(r));
            oob_count[r] += 1;
        }
    }
    let oob_predictions = (0..n)
        .map(|r| (oob_count[r] > 0).then(|| oob_sum[r] / oob_count[r] as f64))
        .collect();

    Ok(RandomForestModel {
        trees: fitted.into_iter().map(|(t, _)| t).collect(),
        params: params.clone(),
        n_features: x.n_cols(),
        oob_predictions,
    })
}
