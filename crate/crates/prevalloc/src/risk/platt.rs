//! Platt scaling: a two-parameter sigmoid over raw classifier scores,
//! fit by damped Newton iterations on the cross-entropy.

use serde::{Deserialize, Serialize};

use super::RiskError;
use crate::linalg::sigmoid;

/// Calibrated probability `sigmoid(a·s + b)` over a raw score `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattCalibrator {
    pub a: f64,
    pub b: f64,
}

impl PlattCalibrator {
    /// Identity-like calibrator: passes log-odds scores straight through
    /// the sigmoid.
    pub fn identity() -> Self {
        Self { a: 1.0, b: 0.0 }
    }

    pub fn calibrate(&self, raw_score: f64) -> f64 {
        sigmoid(self.a * raw_score + self.b)
    }
}

fn cross_entropy(scores: &[f64], labels: &[bool], a: f64, b: f64) -> f64 {
    let mut loss = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        let p = sigmoid(a * s + b).clamp(1e-15, 1.0 - 1e-15);
        loss -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    loss / scores.len() as f64
}

/// Fit `(a, b)` minimizing the cross-entropy of `sigmoid(a·s + b)`.
/// Converges to mean-gradient norm below 1e-8.
pub fn fit_platt(raw_scores: &[f64], labels: &[bool]) -> Result<PlattCalibrator, RiskError> {
    assert_eq!(raw_scores.len(), labels.len(), "score/label length mismatch");
    let n_pos = labels.iter().filter(|&&v| v).count();
    if raw_scores.is_empty() || n_pos == 0 || n_pos == labels.len() {
        return Err(RiskError::SingleClassLabels);
    }
    let n = raw_scores.len() as f64;
    let (mut a, mut b) = (0.0, crate::linalg::logit(n_pos as f64 / n));
    let mut loss = cross_entropy(raw_scores, labels, a, b);

    for _ in 0..200 {
        let (mut ga, mut gb) = (0.0, 0.0);
        let (mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0);
        for (&s, &y) in raw_scores.iter().zip(labels) {
            let p = sigmoid(a * s + b);
            let r = p - if y { 1.0 } else { 0.0 };
            let w = (p * (1.0 - p)).max(1e-12);
            ga += r * s;
            gb += r;
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        ga /= n;
        gb /= n;
        haa = haa / n + 1e-9;
        hab /= n;
        hbb = hbb / n + 1e-9;
        if (ga * ga + gb * gb).sqrt() < 1e-8 {
            break;
        }
        let det = haa * hbb - hab * hab;
        let (da, db) = if det.abs() < 1e-18 {
            (-ga / haa, -gb / hbb)
        } else {
            ((-ga * hbb + gb * hab) / det, (-gb * haa + ga * hab) / det)
        };
        // Damped step: halve until the loss does not increase.
        let mut t = 1.0;
        loop {
            let (at, bt) = (a + t * da, b + t * db);
            let lt = cross_entropy(raw_scores, labels, at, bt);
            if lt <= loss + 1e-15 {
                a = at;
                b = bt;
                loss = lt;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return Ok(PlattCalibrator { a, b });
            }
        }
    }
    Ok(PlattCalibrator { a, b })
}
