use nalgebra::{DMatrix, DVector};

use super::finalize::{finalize_graph, FinalAdjacency};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Minimizer of `||Z - A^T Z||_F^2 + alpha ||A||_F^2` over zero-diagonal
/// `A`, solved one column at a time. `z` is `N x d`; the result is row-major
/// `N x N`. An infinite `alpha` is accepted as the limit and gives zeros.
pub fn ridge_coefficients(z: &Tensor, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::config(format!(
            "ridge alpha must be positive, got {alpha}"
        )));
    }
    let (n, d) = z.dims2();
    if alpha == f64::INFINITY {
        return Ok(vec![0.0; n * n]);
    }
    let zm = DMatrix::from_row_slice(n, d, z.data());
    let gram = &zm * zm.transpose();
    let mut a = vec![0.0; n * n];
    if n < 2 {
        return Ok(a);
    }
    for j in 0..n {
        let others: Vec<usize> = (0..n).filter(|&i| i != j).collect();
        let m = others.len();
        let sys = DMatrix::from_fn(m, m, |r, c| {
            gram[(others[r], others[c])] + if r == c { alpha } else { 0.0 }
        });
        let rhs = DVector::from_fn(m, |r, _| gram[(others[r], j)]);
        let chol = sys
            .cholesky()
            .ok_or_else(|| Error::contract("ridge system is not positive definite"))?;
        let sol = chol.solve(&rhs);
        for (r, &i) in others.iter().enumerate() {
            a[i * n + j] = sol[r];
        }
    }
    Ok(a)
}

/// Label-free graph for unseen windows: ridge self-expression, then
/// finalization.
pub fn construct_inference_graph(z: &Tensor, alpha: f64, k: usize) -> Result<FinalAdjacency> {
    let n = z.dims2().0;
    let a = ridge_coefficients(z, alpha)?;
    finalize_graph(&a, n, k)
}
