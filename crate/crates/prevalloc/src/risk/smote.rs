//! Synthetic minority oversampling.
//!
//! Each synthetic point lies on the segment between a minority sample and
//! one of its k nearest minority neighbors: `x_new = x_i + u·(x_nn − x_i)`
//! with `u ~ Uniform(0,1)`. Enough points are generated to raise the
//! minority/majority ratio to the target.

use rand::Rng;

use super::RiskError;
use crate::linalg::Matrix;
use crate::rng::rng_from_seed;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Oversample the minority class. Returns the original rows followed by the
/// synthetic rows; a target at or below the current ratio is a no-op.
pub fn smote_oversample(
    x: &Matrix,
    y: &[bool],
    k_neighbors: usize,
    target_ratio: f64,
    seed: u64,
) -> Result<(Matrix, Vec<bool>), RiskError> {
    assert_eq!(x.n_rows(), y.len(), "feature/label length mismatch");
    if k_neighbors == 0 {
        return Err(RiskError::InvalidParam("k_neighbors must be at least 1".into()));
    }
    let n_pos = y.iter().filter(|&&v| v).count();
    let n_neg = y.len() - n_pos;
    let minority_label = n_pos <= n_neg;
    let (n_min, n_maj) = if minority_label { (n_pos, n_neg) } else { (n_neg, n_pos) };
    if n_min < k_neighbors + 1 {
        return Err(RiskError::TooFewMinority { have: n_min, need: k_neighbors + 1 });
    }

    let needed = ((target_ratio * n_maj as f64).ceil() as usize).saturating_sub(n_min);
    let mut rows: Vec<Vec<f64>> = x.rows_iter().map(|r| r.to_vec()).collect();
    let mut labels = y.to_vec();
    if needed == 0 || n_maj == 0 {
        return Ok((Matrix::from_rows(&rows), labels));
    }

    let minority_rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == minority_label).collect();
    // k nearest minority neighbors per minority point; ties break by index.
    let neighbors: Vec<Vec<usize>> = minority_rows
        .iter()
        .map(|&i| {
            let mut dists: Vec<(f64, usize)> = minority_rows
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (squared_distance(x.row(i), x.row(j)), j))
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            dists.truncate(k_neighbors);
            dists.into_iter().map(|(_, j)| j).collect()
        })
        .collect();

    let mut rng = rng_from_seed(seed);
    for _ in 0..needed {
        let pick = rng.gen_range(0..minority_rows.len());
        let base = x.row(minority_rows[pick]);
        let nn = x.row(neighbors[pick][rng.gen_range(0..neighbors[pick].len())]);
        let u: f64 = rng.gen();
        rows.push(base.iter().zip(nn).map(|(a, b)| a + u * (b - a)).collect());
        labels.push(minority_label);
    }
    Ok((Matrix::from_rows(&rows), labels))
}
