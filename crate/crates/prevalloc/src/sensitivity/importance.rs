//! Model explanation: permutation importance and sampled Shapley values.
//!
//! Permutation importance is the mean log-loss increase when one feature
//! column is shuffled. The Shapley variant Monte-Carlo-samples feature
//! orderings: walking an ordering from a background row to the explained
//! row, each feature is credited with its marginal change in the model
//! output; global importance is the mean absolute attribution. The sign
//! reported with each feature is the direction of correlation between the
//! feature and the model output.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::risk::{RiskError, RiskModel};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceMethod {
    Permutation,
    ShapleySampling,
}

/// Budgets for the estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImportanceConfig {
    /// Shuffles per feature (permutation method).
    pub n_repeats: usize,
    /// Sampled orderings per explained row (Shapley method).
    pub n_orderings: usize,
    /// Rows explained (Shapley method); capped at the data size.
    pub n_explained: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self { n_repeats: 10, n_orderings: 32, n_explained: 200 }
    }
}

/// One ranked feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub importance: f64,
    /// +1/-1/0: direction of correlation between feature and model output.
    pub sign: f64,
}

fn log_loss(predictions: &[f64], labels: &[bool]) -> f64 {
    let mut loss = 0.0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        loss -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    loss / predictions.len() as f64
}

fn correlation_sign(feature: &[f64], output: &[f64]) -> f64 {
    let n = feature.len() as f64;
    let mx = feature.iter().sum::<f64>() / n;
    let my = output.iter().sum::<f64>() / n;
    let cov: f64 =
        feature.iter().zip(output).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>();
    if cov > 1e-12 {
        1.0
    } else if cov < -1e-12 {
        -1.0
    } else {
        0.0
    }
}

/// Rank features of a risk model on labeled data (`x` in the panel feature
/// space). Results are sorted by decreasing importance; names come from the
/// panel layout.
pub fn feature_importance(
    model: &RiskModel,
    x: &Matrix,
    y: &[bool],
    feature_names: &[String],
    method: ImportanceMethod,
    config: &ImportanceConfig,
    seed: u64,
) -> Result<Vec<FeatureImportance>, RiskError> {
    assert_eq!(x.n_rows(), y.len(), "feature/label mismatch");
    assert!(x.n_rows() > 0, "importance needs data");
    let n = x.n_rows();
    let baseline_preds: Vec<f64> =
        (0..n).map(|i| model.predict_risk(x.row(i))).collect::<Result<_, _>>()?;

    let mut out = Vec::with_capacity(x.n_cols());
    match method {
        ImportanceMethod::Permutation => {
            let baseline = log_loss(&baseline_preds, y);
            for col in 0..x.n_cols() {
                let mut increase = 0.0;
                for rep in 0..config.n_repeats {
                    let mut rng = rng_from_seed(derive_seed(seed, (col * 10_000 + rep) as u64));
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng);
                    let preds: Vec<f64> = (0..n)
                        .map(|i| {
                            let mut row = x.row(i).to_vec();
                            row[col] = x.get(perm[i], col);
                            model.predict_risk(&row)
                        })
                        .collect::<Result<_, _>>()?;
                    increase += log_loss(&preds, y) - baseline;
                }
                out.push(FeatureImportance {
                    feature: feature_names[col].clone(),
                    importance: increase / config.n_repeats as f64,
                    sign: correlation_sign(&x.column(col), &baseline_preds),
                });
            }
        }
        ImportanceMethod::ShapleySampling => {
            let mut rng = rng_from_seed(seed);
            let explained: Vec<usize> = if n <= config.n_explained {
                (0..n).collect()
            } else {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                idx.truncate(config.n_explained);
                idx
            };
            let mut abs_sum = vec![0.0; x.n_cols()];
            let mut order: Vec<usize> = (0..x.n_cols()).collect();
            for &row_idx in &explained {
                let target = x.row(row_idx);
                let mut phi = vec![0.0; x.n_cols()];
                for _ in 0..config.n_orderings {
                    let background = x.row(rng.gen_range(0..n));
                    order.shuffle(&mut rng);
                    let mut current = background.to_vec();
                    let mut prev = model.predict_risk(&current)?;
                    for &f in &order {
                        current[f] = target[f];
                        let next = model.predict_risk(&current)?;
                        phi[f] += next - prev;
                        prev = next;
                    }
                }
                for (a, p) in abs_sum.iter_mut().zip(&phi) {
                    *a += (p / config.n_orderings as f64).abs();
                }
            }
            for col in 0..x.n_cols() {
                out.push(FeatureImportance {
                    feature: feature_names[col].clone(),
                    importance: abs_sum[col] / explained.len() as f64,
                    sign: correlation_sign(&x.column(col), &baseline_preds),
                });
            }
        }
    }
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.feature.cmp(&b.feature)));
    Ok(out)
}
