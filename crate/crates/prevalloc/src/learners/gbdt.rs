//! Gradient-boosted decision trees for binary classification.
//!
//! Trees are fit to the negative gradients of (optionally class-weighted)
//! binary cross-entropy; leaves take penalized Newton steps and grow
//! leaf-wise up to a leaf budget. After every boosting round the training
//! loss is checked: a round that would increase it has its leaf values damped
//! until the loss is non-increasing, so staged training loss is monotone by
//! construction.

use serde::{Deserialize, Serialize};

use super::tree::{fit_grad_hess_tree, GrowParams, Tree};
use super::{class_weights, ClassWeight, LearnerError};
use crate::linalg::{logit, sigmoid, Matrix};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub n_leaves: usize,
    pub learning_rate: f64,
    pub min_child_samples: usize,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub class_weight: ClassWeight,
    /// Optional depth cap on top of the leaf budget.
    #[serde(default)]
    pub max_depth: Option<usize>,
    /// Cap on rows scanned per split search.
    #[serde(default)]
    pub bin_sample_cap: Option<usize>,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            n_leaves: 31,
            learning_rate: 0.1,
            min_child_samples: 20,
            lambda_l1: 0.0,
            lambda_l2: 0.0,
            class_weight: ClassWeight::Balanced,
            max_depth: None,
            bin_sample_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    /// Prior log-odds of the (weighted) base rate.
    pub base_score: f64,
    pub params: GbdtParams,
    pub n_features: usize,
    /// Weighted training log-loss after each boosting round, starting with
    /// the prior-only loss.
    pub train_losses: Vec<f64>,
}

impl GbdtModel {
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64, LearnerError> {
        if x.len() != self.n_features {
            return Err(LearnerError::DimensionMismatch { expected: self.n_features, got: x.len() });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(self.base_score + self.learning_rate * sum)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, LearnerError> {
        Ok(sigmoid(self.predict_raw(x)?).clamp(1e-12, 1.0 - 1e-12))
    }
}

fn weighted_log_loss(raw: &[f64], y: &[bool], w: &[f64]) -> f64 {
    let mut loss = 0.0;
    let mut wsum = 0.0;
    for i in 0..y.len() {
        let p = sigmoid(raw[i]).clamp(1e-12, 1.0 - 1e-12);
        loss -= w[i] * if y[i] { p.ln() } else { (1.0 - p).ln() };
        wsum += w[i];
    }
    loss / wsum
}

/// Fit a boosted-tree classifier. Deterministic given `seed` (only the
/// optional split-scan subsample draws randomness).
pub fn fit_gbdt(
    x: &Matrix,
    y: &[bool],
    params: &GbdtParams,
    seed: u64,
) -> Result<GbdtModel, LearnerError> {
    if x.n_rows() != y.len() {
        return Err(LearnerError::DimensionMismatch { expected: x.n_rows(), got: y.len() });
    }
    if x.n_rows() == 0 {
        return Err(LearnerError::EmptyData);
    }
    if x.n_rows() < params.min_child_samples {
        return Err(LearnerError::TooFewSamples { got: x.n_rows(), need: params.min_child_samples });
    }
    if !x.has_only_finite() {
        return Err(LearnerError::NonFinite);
    }
    let n_pos = y.iter().filter(|&&v| v).count();
    if n_pos == 0 || n_pos == y.len() {
        return Err(LearnerError::DegenerateLabels);
    }

    let w = class_weights(y, params.class_weight);
    let wsum: f64 = w.iter().sum();
    let wpos: f64 = y.iter().zip(&w).filter(|(y, _)| **y).map(|(_, w)| w).sum();
    let base_score = logit(wpos / wsum);

    let grow = GrowParams {
        max_leaves: params.n_leaves,
        max_depth: params.max_depth,
        min_child_samples: params.min_child_samples,
        lambda_l1: params.lambda_l1,
        lambda_l2: params.lambda_l2,
        split_sample_cap: params.bin_sample_cap,
    };
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    let mut raw = vec![base_score; x.n_rows()];
    let mut losses = vec![weighted_log_loss(&raw, y, &w)];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut grad = vec![0.0; x.n_rows()];
    let mut hess = vec![0.0; x.n_rows()];

    for round in 0..params.n_trees {
        for i in 0..x.n_rows() {
            let p = sigmoid(raw[i]);
            let target = if y[i] { 1.0 } else { 0.0 };
            grad[i] = w[i] * (p - target);
            hess[i] = (w[i] * p * (1.0 - p)).max(1e-12);
        }
        let mut rng = rng_from_seed(derive_seed(seed, round as u64));
        let mut tree = fit_grad_hess_tree(x, &grad, &hess, &rows, &grow, &mut rng);
        if tree.n_leaves() == 1 && tree.predict(x.row(0)).abs() < 1e-12 {
            // No split available and nothing to correct; further rounds are no-ops.
            break;
        }

        let step: Vec<f64> = rows.iter().map(|&r| tree.predict(x.row(r))).collect();
        let prev = *losses.last().unwrap();
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate: Vec<f64> = raw
                .iter()
                .zip(&step)
                .map(|(r, s)| r + params.learning_rate * scale * s)
                .collect();
            let loss = weighted_log_loss(&candidate, y, &w);
            if loss <= prev + 1e-12 {
                raw = candidate;
                losses.push(loss);
                if scale != 1.0 {
                    tree.map_leaves(|v| v * scale);
                }
                trees.push(tree);
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // No damped version of this tree helps; training has converged.
            break;
        }
    }

    Ok(GbdtModel {
        trees,
        learning_rate: params.learning_rate,
        base_score,
        params: params.clone(),
        n_features: x.n_cols(),
        train_losses: losses,
    })
}
