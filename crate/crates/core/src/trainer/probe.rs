use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ridge-regression classifier on fixed embeddings: fits `+-1` targets with
/// an unpenalized intercept and returns the decision value of each test row.
pub fn ridge_probe_scores(
    train: &[Vec<f64>],
    targets: &[bool],
    test: &[Vec<f64>],
    ridge: f64,
) -> Result<Vec<f64>> {
    if train.is_empty() || train.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} training rows for {} targets",
            train.len(),
            targets.len()
        )));
    }
    let d = train[0].len();
    if train.iter().chain(test).any(|r| r.len() != d) {
        return Err(Error::contract("probe rows differ in width"));
    }
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let y: Vec<f64> = targets
        .iter()
        .map(|&t| if t { 1.0 } else { -1.0 })
        .collect();
    let y_mean = y.iter().sum::<f64>() / n;
    let x = DMatrix::from_fn(train.len(), d, |i, j| train[i][j] - mean[j]);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    let gram = x.transpose() * &x + DMatrix::identity(d, d) * ridge;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::contract("probe system is not positive definite"))?
        .solve(&(x.transpose() * yc));
    Ok(test
        .iter()
        .map(|r| {
            y_mean
                + r.iter()
                    .zip(&mean)
                    .zip(w.iter())
                    .map(|((v, m), w)| (v - m) * w)
                    .sum::<f64>()
        })
        .collect())
}
