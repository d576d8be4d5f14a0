use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Min-max normalized, Top-K sparsified adjacency. `weights` doubles as the
/// structure-confidence matrix fed to attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalAdjacency {
    pub nodes: usize,
    pub k: usize,
    pub weights: Vec<f64>,
}

impl FinalAdjacency {
    pub fn empty(nodes: usize, k: usize) -> Self {
        FinalAdjacency {
            nodes,
            k,
            weights: vec![0.0; nodes * nodes],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.nodes + j]
    }

    /// Confidence scores; identical to the finalized weights.
    pub fn phi(&self) -> &[f64] {
        &self.weights
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.nodes, self.nodes, self.weights.clone()).expect("sized")
    }

    pub fn density(&self) -> f64 {
        edge_density(&self.weights, self.nodes)
    }

    /// Nonzero entries as `(row, col, weight)` in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.nodes;
        (0..n * n)
            .filter(|&k| self.weights[k] != 0.0)
            .map(|k| (k / n, k % n, self.weights[k]))
            .collect()
    }

    pub fn binarized(&self) -> Self {
        FinalAdjacency {
            weights: self
                .weights
                .iter()
                .map(|&w| if w != 0.0 { 1.0 } else { 0.0 })
                .collect(),
            ..self.clone()
        }
    }
}

/// Fraction of the `n(n-1)` off-diagonal slots holding a nonzero weight.
pub fn edge_density(adjacency: &[f64], n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let count = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && adjacency[i * n + j] != 0.0)
        .count();
    count as f64 / (n * (n - 1)) as f64
}

/// How a raw coefficient matrix maps onto its finalized form.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Normalization {
    /// `mask * (|a| - min) * scale`
    Affine {
        min: f64,
        scale: f64,
        mask: Vec<f64>,
    },
    /// All off-diagonal magnitudes coincide; the result is a fixed matrix.
    Constant(Vec<f64>),
}

pub(crate) fn plan_finalization(a: &[f64], n: usize, k: usize) -> Result<Normalization> {
    if a.len() != n * n {
        return Err(Error::Shape {
            op: "finalize_graph",
            lhs: vec![n, n],
            rhs: vec![a.len()],
        });
    }
    if n < 2 || k < 1 || k > n - 1 {
        return Err(Error::config(format!(
            "top-k {k} outside [1, {}]",
            n.saturating_sub(1)
        )));
    }
    let off = |i: usize, j: usize| a[i * n + j].abs();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                min = min.min(off(i, j));
                max = max.max(off(i, j));
            }
        }
    }
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        let mut cols: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        // descending magnitude, ties to the lower column
        cols.sort_by(|&x, &y| off(i, y).total_cmp(&off(i, x)).then(x.cmp(&y)));
        for &j in cols.iter().take(k) {
            mask[i * n + j] = 1.0;
        }
    }
    if max == min {
        let fill = if max == 0.0 { 0.0 } else { 1.0 };
        return Ok(Normalization::Constant(
            mask.iter().map(|m| m * fill).collect(),
        ));
    }
    Ok(Normalization::Affine {
        min,
        scale: 1.0 / (max - min),
        mask,
    })
}

/// Min-max normalizes `|a|` over the off-diagonal entries, then keeps the
/// `k` largest entries of each row (ties go to the lower column index).
pub fn finalize_graph(a: &[f64], n: usize, k: usize) -> Result<FinalAdjacency> {
    let weights = match plan_finalization(a, n, k)? {
        Normalization::Constant(w) => w,
        Normalization::Affine { min, scale, mask } => a
            .iter()
            .zip(&mask)
            .map(|(x, m)| m * ((x.abs() - min) * scale))
            .collect(),
    };
    Ok(FinalAdjacency {
        nodes: n,
        k,
        weights,
    })
}

/// Differentiable counterpart of [`finalize_graph`]. The Top-K selection is
/// frozen at its current value; the min-max constants stay on the tape, so
/// the extreme entries also receive gradient through the normalization.
pub fn finalize_on_tape(tape: &mut Tape, a: Var, k: usize, binarize: bool) -> Result<Var> {
    let t = tape.value(a);
    let (n, cols) = t.dims2();
    if n != cols {
        return Err(Error::contract("adjacency must be square"));
    }
    let (lo, hi) = extreme_positions(t.data(), n);
    let plan = plan_finalization(t.data(), n, k)?;
    match plan {
        Normalization::Constant(w) => Ok(tape.constant(Tensor::matrix(n, n, w)?)),
        Normalization::Affine { mask, .. } if binarize => {
            Ok(tape.constant(Tensor::matrix(n, n, mask)?))
        }
        Normalization::Affine { mask, .. } => {
            let m = tape.constant(Tensor::matrix(n, n, mask)?);
            let abs = tape.abs(a);
            let flat = tape.reshape(abs, vec![n * n, 1])?;
            let min = tape.gather_rows(flat, &[lo])?;
            let max = tape.gather_rows(flat, &[hi])?;
            let range = tape.sub(max, min)?;
            let inv = tape.powf(range, -1.0);
            let col = tape.constant(Tensor::full(&[n, 1], 1.0));
            let row = tape.constant(Tensor::full(&[1, n], 1.0));
            let spread = tape.matmul(col, min)?;
            let spread = tape.matmul(spread, row)?;
            let shifted = tape.sub(abs, spread)?;
            let scaled = tape.scale_by(shifted, inv)?;
            tape.mul(m, scaled)
        }
    }
}

/// Flat positions of the first off-diagonal minimum and maximum of `|a|`.
fn extreme_positions(a: &[f64], n: usize) -> (usize, usize) {
    let mut lo = usize::MAX;
    let mut hi = usize::MAX;
    for x in (0..n * n).filter(|x| x / n != x % n) {
        if lo == usize::MAX || a[x].abs() < a[lo].abs() {
            lo = x;
        }
        if hi == usize::MAX || a[x].abs() > a[hi].abs() {
            hi = x;
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_adjacency(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::substream(seed, "finalize-test");
        let mut a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        for i in 0..n {
            a[i * n + i] = 0.0;
        }
        a
    }

    /// Independent oracle: normalize every off-diagonal entry, then per row
    /// rank (value desc, column asc) and zero everything past rank k.
    fn oracle(a: &[f64], n: usize, k: usize) -> Vec<f64> {
        let vals: Vec<f64> = (0..n * n)
            .filter(|x| x / n != x % n)
            .map(|x| a[x].abs())
            .collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let better = (0..n)
                    .filter(|&c| c != i && c != j)
                    .filter(|&c| {
                        a[i * n + c].abs() > a[i * n + j].abs()
                            || (a[i * n + c].abs() == a[i * n + j].abs() && c < j)
                    })
                    .count();
                if better < k {
                    out[i * n + j] = (a[i * n + j].abs() - lo) * (1.0 / (hi - lo));
                }
            }
        }
        out
    }

    #[test]
    fn matches_sort_and_mask_oracle() {
        for seed in 0..20 {
            let a = random_adjacency(5, seed);
            let f = finalize_graph(&a, 5, 2).unwrap();
            assert_eq!(f.weights, oracle(&a, 5, 2), "seed {seed}");
        }
    }

    #[test]
    fn equal_entries_keep_lowest_columns() {
        let n = 4;
        let mut a = vec![0.7; n * n];
        for i in 0..n {
            a[i * n + i] = 0.0;
        }
        let f = finalize_graph(&a, n, 2).unwrap();
        for i in 0..n {
            let kept: Vec<usize> = (0..n).filter(|&j| f.get(i, j) == 1.0).collect();
            let expected: Vec<usize> = (0..n).filter(|&j| j != i).take(2).collect();
            assert_eq!(kept, expected);
        }
        let zero = finalize_graph(&vec![0.0; n * n], n, 2).unwrap();
        assert!(zero.weights.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn dominant_entry_becomes_one() {
        let n = 3;
        let a = vec![0.0, 5.0, 0.1, 0.2, 0.0, 5.0, 5.0, 0.3, 0.0];
        let f = finalize_graph(&a, n, 1).unwrap();
        assert_eq!(f.get(0, 1), 1.0);
        assert_eq!(f.get(1, 2), 1.0);
        assert_eq!(f.get(2, 0), 1.0);
        assert_eq!(f.edges().len(), 3);
    }

    #[test]
    fn k_out_of_range_is_a_config_error() {
        let a = random_adjacency(4, 1);
        assert!(matches!(finalize_graph(&a, 4, 0), Err(Error::Config(_))));
        assert!(matches!(finalize_graph(&a, 4, 4), Err(Error::Config(_))));
    }

    #[test]
    fn density_counts() {
        let n = 5;
        assert_eq!(edge_density(&vec![0.0; n * n], n), 0.0);
        let mut full = vec![1.0; n * n];
        for i in 0..n {
            full[i * n + i] = 0.0;
        }
        assert_eq!(edge_density(&full, n), 1.0);
        // distinct magnitudes, none equal to the global minimum in any row's top-2
        let a: Vec<f64> = (0..n * n)
            .map(|x| if x / n == x % n { 0.0 } else { 1.0 + x as f64 })
            .collect();
        let f = finalize_graph(&a, n, 2).unwrap();
        assert_eq!(f.density(), 2.0 / 4.0);
    }

    #[test]
    fn tape_version_matches_values_and_gradients() {
        let n = 4;
        let a = random_adjacency(n, 7);
        let f = finalize_graph(&a, n, 2).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(n, n, a.clone()).unwrap());
        let out = finalize_on_tape(&mut tape, v, 2, false).unwrap();
        assert_eq!(tape.value(out).data(), f.weights.as_slice());

        // selection frozen, normalization differentiable
        let w = random_adjacency(n, 8);
        let err = crate::autodiff::grad_check(
            |tape, v| {
                let y = finalize_on_tape(tape, v, 2, false)?;
                let wv = tape.constant(Tensor::matrix(n, n, w.clone())?);
                let p = tape.mul(y, wv)?;
                Ok(tape.sum(p))
            },
            &Tensor::matrix(n, n, a.clone()).unwrap(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    proptest! {
        #[test]
        fn finalized_graphs_satisfy_invariants(n in 2usize..8, seed in any::<u64>(), kf in 0.0f64..1.0) {
            let k = 1 + ((n - 1) as f64 * kf) as usize % (n - 1);
            let a = random_adjacency(n, seed);
            let f = finalize_graph(&a, n, k).unwrap();
            for i in 0..n {
                prop_assert_eq!(f.get(i, i), 0.0);
                let row_nnz = (0..n).filter(|&j| f.get(i, j) != 0.0).count();
                prop_assert!(row_nnz <= k);
                for j in 0..n {
                    prop_assert!((0.0..=1.0).contains(&f.get(i, j)));
                }
            }
            prop_assert!(f.density() <= k as f64 / (n - 1) as f64 + 1e-12);
        }

        #[test]
        fn kept_edges_invariant_to_positive_scaling(seed in any::<u64>(), c in 0.01f64..100.0) {
            let n = 6;
            let a = random_adjacency(n, seed);
            let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
            let support = |f: &FinalAdjacency| {
                (0..n * n).map(|k| f.weights[k] != 0.0).collect::<Vec<_>>()
            };
            let fa = finalize_graph(&a, n, 2).unwrap();
            let fb = finalize_graph(&scaled, n, 2).unwrap();
            prop_assert_eq!(support(&fa), support(&fb));
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>(), pseed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let n = 5;
            let a = random_adjacency(n, seed);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut crate::rng::substream(pseed, "perm"));
            // (P A P^T)[i][j] = A[perm[i]][perm[j]]
            let conj = |m: &[f64]| {
                (0..n * n).map(|k| m[perm[k / n] * n + perm[k % n]]).collect::<Vec<_>>()
            };
            let lhs = finalize_graph(&conj(&a), n, 2).unwrap();
            let rhs = finalize_graph(&a, n, 2).unwrap();
            prop_assert_eq!(lhs.weights, conj(&rhs.weights));
        }
    }
}
