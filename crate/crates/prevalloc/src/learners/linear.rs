//! Regularized linear (logistic) models.
//!
//! L1 fits run coordinate descent with per-coordinate Newton steps and soft
//! thresholding; L2 fits run gradient descent with backtracking line search.
//! Both minimize mean logistic loss plus the penalty and stop when the
//! (sub)gradient norm drops below 1e-6. The intercept is never penalized.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::linalg::{sigmoid, solve, Matrix};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub penalty: Penalty,
    pub alpha: f64,
}

impl LinearModel {
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64, LearnerError> {
        if x.len() != self.weights.len() {
            return Err(LearnerError::DimensionMismatch { expected: self.weights.len(), got: x.len() });
        }
        Ok(self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, LearnerError> {
        Ok(sigmoid(self.predict_raw(x)?).clamp(1e-12, 1.0 - 1e-12))
    }
}

const GRAD_TOL: f64 = 1e-6;

/// Mean logistic loss plus penalty; used by tests and the line search.
pub fn penalized_loss(x: &Matrix, y: &[bool], w: &[f64], b: f64, penalty: Penalty, alpha: f64) -> f64 {
    let n = x.n_rows() as f64;
    let mut loss = 0.0;
    for i in 0..x.n_rows() {
        let z = b + x.row(i).iter().zip(w).map(|(v, w)| v * w).sum::<f64>();
        // log(1 + e^-m) with m = z for y=1, -z for y=0, computed stably
        let m = if y[i] { z } else { -z };
        loss += if m > 0.0 { (-m).exp().ln_1p() } else { (m.exp().ln_1p()) - m };
    }
    loss /= n;
    let pen: f64 = match penalty {
        Penalty::L1 => alpha * w.iter().map(|v| v.abs()).sum::<f64>(),
        Penalty::L2 => 0.5 * alpha * w.iter().map(|v| v * v).sum::<f64>(),
    };
    loss + pen
}

fn validate(x: &Matrix, y: &[bool], alpha: f64) -> Result<(), LearnerError> {
    if x.n_rows() != y.len() {
        return Err(LearnerError::DimensionMismatch { expected: x.n_rows(), got: y.len() });
    }
    if x.n_rows() == 0 {
        return Err(LearnerError::EmptyData);
    }
    if !x.has_only_finite() {
        return Err(LearnerError::NonFinite);
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(LearnerError::InvalidParam(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// Fit a logistic model with an L1 or L2 penalty of strength `alpha`.
pub fn fit_linear(
    x: &Matrix,
    y: &[bool],
    penalty: Penalty,
    alpha: f64,
    seed: u64,
) -> Result<LinearModel, LearnerError> {
    validate(x, y, alpha)?;
    match penalty {
        Penalty::L1 => fit_l1(x, y, alpha, seed),
        Penalty::L2 => fit_l2(x, y, alpha),
    }
}

fn fit_l1(x: &Matrix, y: &[bool], alpha: f64, seed: u64) -> Result<LinearModel, LearnerError> {
    let n = x.n_rows();
    let d = x.n_cols();
    let nf = n as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut raw = vec![0.0; n];
    let mut rng = rng_from_seed(seed);
    let mut coords: Vec<usize> = (0..d).collect();

    for _epoch in 0..20_000 {
        coords.shuffle(&mut rng);
        for &j in &coords {
            let (mut g, mut h) = (0.0, 0.0);
            for i in 0..n {
                let p = sigmoid(raw[i]);
                let target = if y[i] { 1.0 } else { 0.0 };
                let xij = x.get(i, j);
                g += xij * (p - target);
                h += xij * xij * p * (1.0 - p);
            }
            g /= nf;
            h = (h / nf).max(1e-10);
            // Penalized one-dimensional Newton step with soft threshold.
            let u = h * w[j] - g;
            let w_new = if u > alpha {
                (u - alpha) / h
            } else if u < -alpha {
                (u + alpha) / h
            } else {
                0.0
            };
            let delta = w_new - w[j];
            if delta != 0.0 {
                for i in 0..n {
                    raw[i] += delta * x.get(i, j);
                }
                w[j] = w_new;
            }
        }
        // Intercept: unpenalized Newton step.
        let (mut g0, mut h0) = (0.0, 0.0);
        for i in 0..n {
            let p = sigmoid(raw[i]);
            g0 += p - if y[i] { 1.0 } else { 0.0 };
            h0 += p * (1.0 - p);
        }
        g0 /= nf;
        h0 = (h0 / nf).max(1e-10);
        let db = -g0 / h0;
        if db != 0.0 {
            b += db;
            for r in raw.iter_mut() {
                *r += db;
            }
        }

        // Convergence: minimum-norm subgradient.
        let mut sq = g0 * g0;
        for j in 0..d {
            let mut g = 0.0;
            for i in 0..n {
                g += x.get(i, j) * (sigmoid(raw[i]) - if y[i] { 1.0 } else { 0.0 });
            }
            g /= nf;
            let sg = if w[j] > 0.0 {
                g + alpha
            } else if w[j] < 0.0 {
                g - alpha
            } else {
                (g.abs() - alpha).max(0.0) * g.signum()
            };
            sq += sg * sg;
        }
        if sq.sqrt() < GRAD_TOL {
            break;
        }
    }
    Ok(LinearModel { weights: w, intercept: b, penalty: Penalty::L1, alpha })
}

fn fit_l2(x: &Matrix, y: &[bool], alpha: f64) -> Result<LinearModel, LearnerError> {
    let n = x.n_rows();
    let d = x.n_cols();
    let nf = n as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut step = 1.0f64;
    let mut loss = penalized_loss(x, y, &w, b, Penalty::L2, alpha);

    for _iter in 0..200_000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for i in 0..n {
            let z = b + x.row(i).iter().zip(&w).map(|(v, w)| v * w).sum::<f64>();
            let r = sigmoid(z) - if y[i] { 1.0 } else { 0.0 };
            for j in 0..d {
                gw[j] += r * x.get(i, j);
            }
            gb += r;
        }
        for j in 0..d {
            gw[j] = gw[j] / nf + alpha * w[j];
        }
        gb /= nf;
        let norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if norm < GRAD_TOL {
            break;
        }
        // Backtracking line search with a slowly growing trial step.
        step = (step * 2.0).min(1e6);
        loop {
            let wt: Vec<f64> = w.iter().zip(&gw).map(|(w, g)| w - step * g).collect();
            let bt = b - step * gb;
            let lt = penalized_loss(x, y, &wt, bt, Penalty::L2, alpha);
            if lt <= loss - 0.5 * step * norm * norm * 1e-4 {
                w = wt;
                b = bt;
                loss = lt;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                return Ok(LinearModel { weights: w, intercept: b, penalty: Penalty::L2, alpha });
            }
        }
    }
    Ok(LinearModel { weights: w, intercept: b, penalty: Penalty::L2, alpha })
}

/// Ridge linear regression (squared loss, no intercept) by gradient descent:
/// minimizes `(1/2n)‖Xw − y‖² + (α/2)‖w‖²`. Matches the normal-equations
/// closed form; kept public as an independent cross-check target.
pub fn fit_ridge_regression(x: &Matrix, y: &[f64], alpha: f64) -> Result<Vec<f64>, LearnerError> {
    if x.n_rows() != y.len() {
        return Err(LearnerError::DimensionMismatch { expected: x.n_rows(), got: y.len() });
    }
    if !(alpha > 0.0) {
        return Err(LearnerError::InvalidParam("alpha must be positive".into()));
    }
    let n = x.n_rows();
    let d = x.n_cols();
    let nf = n as f64;
    let mut w = vec![0.0; d];
    let loss = |w: &[f64]| {
        let mut l = 0.0;
        for i in 0..n {
            let r = x.row(i).iter().zip(w).map(|(v, w)| v * w).sum::<f64>() - y[i];
            l += r * r;
        }
        0.5 * l / nf + 0.5 * alpha * w.iter().map(|v| v * v).sum::<f64>()
    };
    let mut cur = loss(&w);
    let mut step = 1.0f64;
    for _ in 0..500_000 {
        let mut g = vec![0.0; d];
        for i in 0..n {
            let r = x.row(i).iter().zip(&w).map(|(v, w)| v * w).sum::<f64>() - y[i];
            for j in 0..d {
                g[j] += r * x.get(i, j);
            }
        }
        for j in 0..d {
            g[j] = g[j] / nf + alpha * w[j];
        }
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            break;
        }
        step = (step * 2.0).min(1e6);
        loop {
            let wt: Vec<f64> = w.iter().zip(&g).map(|(w, g)| w - step * g).collect();
            let lt = loss(&wt);
            if lt <= cur - 0.5 * step * norm * norm * 1e-4 {
                w = wt;
                cur = lt;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                return Ok(w);
            }
        }
    }
    Ok(w)
}

/// Closed-form ridge solution `(XᵀX/n + αI)⁻¹ Xᵀy/n`; the oracle side of the
/// gradient-descent cross-check.
pub fn ridge_closed_form(x: &Matrix, y: &[f64], alpha: f64) -> Result<Vec<f64>, LearnerError> {
    let n = x.n_rows() as f64;
    let d = x.n_cols();
    let mut xtx = Matrix::zeros(d, d);
    let mut xty = vec![0.0; d];
    for i in 0..x.n_rows() {
        let row = x.row(i);
        for a in 0..d {
            xty[a] += row[a] * y[i] / n;
            for b in 0..d {
                let v = xtx.get(a, b) + row[a] * row[b] / n;
                xtx.set(a, b, v);
            }
        }
    }
    for a in 0..d {
        let v = xtx.get(a, a) + alpha;
        xtx.set(a, a, v);
    }
    solve(&xtx, &xty).map_err(|e| LearnerError::InvalidParam(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logistic_data() -> (Matrix, Vec<bool>) {
        // y depends on feature 0 positively, feature 1 is noise
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..80 {
            let x0 = (i as f64 - 40.0) / 10.0;
            let x1 = ((i * 7) % 11) as f64 / 11.0 - 0.5;
            rows.push(vec![x0, x1]);
            y.push(x0 + 0.1 * x1 > 0.0);
        }
        (Matrix::from_rows(&rows), y)
    }

    #[test]
    fn huge_alpha_shrinks_weights_to_zero() {
        let (x, y) = logistic_data();
        for penalty in [Penalty::L1, Penalty::L2] {
            let m = fit_linear(&x, &y, penalty, 1e4, 0).unwrap();
            let max_w = m.weights.iter().fold(0.0f64, |a, w| a.max(w.abs()));
            assert!(max_w < 1e-3, "{penalty:?}: |w|_inf = {max_w}");
        }
    }

    #[test]
    fn positive_correlation_gives_positive_weight() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 10.0]).collect();
        let y: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let x = Matrix::from_rows(&rows);
        for penalty in [Penalty::L1, Penalty::L2] {
            let m = fit_linear(&x, &y, penalty, 0.01, 0).unwrap();
            assert!(m.weights[0] > 0.0, "{penalty:?}: w = {}", m.weights[0]);
        }
    }

    #[test]
    fn solution_beats_dense_grid_search() {
        let (x, y) = logistic_data();
        for penalty in [Penalty::L1, Penalty::L2] {
            let m = fit_linear(&x, &y, penalty, 0.05, 0).unwrap();
            let fitted = penalized_loss(&x, &y, &m.weights, m.intercept, penalty, 0.05);
            // Grid oracle over (w0, w1, b).
            let mut best = f64::INFINITY;
            let grid: Vec<f64> = (-60..=60).map(|i| i as f64 * 0.05).collect();
            for &w0 in &grid {
                for &w1 in &grid {
                    for &b in &[-0.4, -0.2, 0.0, 0.2, 0.4] {
                        let l = penalized_loss(&x, &y, &[w0, w1], b, penalty, 0.05);
                        if l < best {
                            best = l;
                        }
                    }
                }
            }
            assert!(fitted <= best + 1e-4, "{penalty:?}: fitted {fitted} vs grid {best}");
        }
    }

    #[test]
    fn gradient_descent_matches_closed_form_ridge() {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64) / 25.0 - 1.0, ((i * 13) % 17) as f64 / 17.0])
            .collect();
        let x = Matrix::from_rows(&rows);
        let y: Vec<f64> = rows.iter().map(|r| 2.0 * r[0] - 1.5 * r[1] + 0.3).collect();
        let alpha = 0.1;
        let gd = fit_ridge_regression(&x, &y, alpha).unwrap();
        let cf = ridge_closed_form(&x, &y, alpha).unwrap();
        for (a, b) in gd.iter().zip(&cf) {
            assert!((a - b).abs() < 1e-6, "gd {a} vs closed form {b}");
        }
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let x = Matrix::from_rows(&[vec![f64::NAN], vec![1.0]]);
        assert!(matches!(
            fit_linear(&x, &[true, false], Penalty::L2, 0.1, 0),
            Err(LearnerError::NonFinite)
        ));
    }

    #[test]
    fn invalid_alpha_rejected() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]);
        assert!(matches!(
            fit_linear(&x, &[false, true], Penalty::L1, 0.0, 0),
            Err(LearnerError::InvalidParam(_))
        ));
    }
}
