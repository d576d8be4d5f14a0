use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Free per-window `N x N` coefficient matrices of one clip. The diagonal is
/// held at zero structurally: it is masked on the tape and never written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyParams {
    pub windows: usize,
    pub nodes: usize,
    pub values: Vec<f64>,
}

impl AdjacencyParams {
    pub fn zeros(windows: usize, nodes: usize) -> Self {
        AdjacencyParams {
            windows,
            nodes,
            values: vec![0.0; windows * nodes * nodes],
        }
    }

    /// Small uniform off-diagonal initialization in `[-scale, scale]`.
    pub fn random(windows: usize, nodes: usize, scale: f64, rng: &mut StreamRng) -> Self {
        let mut a = Self::zeros(windows, nodes);
        for t in 0..windows {
            for i in 0..nodes {
                for j in 0..nodes {
                    if i != j {
                        a.values[(t * nodes + i) * nodes + j] = rng.random_range(-scale..=scale);
                    }
                }
            }
        }
        a
    }

    pub fn from_windows(nodes: usize, mats: &[Vec<f64>]) -> Result<Self> {
        let mut values = Vec::with_capacity(mats.len() * nodes * nodes);
        for m in mats {
            if m.len() != nodes * nodes {
                return Err(Error::Shape {
                    op: "adjacency",
                    lhs: vec![nodes, nodes],
                    rhs: vec![m.len()],
                });
            }
            values.extend_from_slice(m);
        }
        let mut a = AdjacencyParams {
            windows: mats.len(),
            nodes,
            values,
        };
        a.zero_diagonal();
        Ok(a)
    }

    pub fn window(&self, t: usize) -> &[f64] {
        let s = self.nodes * self.nodes;
        &self.values[t * s..(t + 1) * s]
    }

    pub fn window_mut(&mut self, t: usize) -> &mut [f64] {
        let s = self.nodes * self.nodes;
        &mut self.values[t * s..(t + 1) * s]
    }

    pub fn diagonal_is_zero(&self) -> bool {
        let n = self.nodes;
        (0..self.windows).all(|t| (0..n).all(|i| self.window(t)[i * n + i] == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn zero_diagonal(&mut self) {
        let n = self.nodes;
        for t in 0..self.windows {
            let w = self.window_mut(t);
            for i in 0..n {
                w[i * n + i] = 0.0;
            }
        }
    }

    /// Off-diagonal indicator matrix.
    pub fn off_diagonal_mask(n: usize) -> Tensor {
        let data = (0..n * n)
            .map(|k| if k / n == k % n { 0.0 } else { 1.0 })
            .collect();
        Tensor::matrix(n, n, data).expect("sized")
    }

    /// Records each window as a masked leaf; returns the raw leaves (which
    /// collect gradients) and the masked matrices used downstream.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<(Vec<Var>, Vec<Var>)> {
        let n = self.nodes;
        let mask = tape.constant(Self::off_diagonal_mask(n));
        let mut raw = Vec::with_capacity(self.windows);
        let mut masked = Vec::with_capacity(self.windows);
        for t in 0..self.windows {
            let m = Tensor::matrix(n, n, self.window(t).to_vec())?;
            let v = if trainable {
                tape.param(m)
            } else {
                tape.constant(m)
            };
            raw.push(v);
            masked.push(tape.mul(v, mask)?);
        }
        Ok((raw, masked))
    }

    /// Flat gradient aligned with `values`; windows without a gradient are
    /// zero and the diagonal is forced to zero.
    pub fn collect_grad(&self, tape: &Tape, raw: &[Var]) -> Vec<f64> {
        let n = self.nodes;
        let mut g = vec![0.0; self.values.len()];
        for (t, v) in raw.iter().enumerate() {
            if let Some(gt) = tape.grad(*v) {
                g[t * n * n..(t + 1) * n * n].copy_from_slice(gt);
            }
            for i in 0..n {
                g[(t * n + i) * n + i] = 0.0;
            }
        }
        g
    }

    /// Applies an update computed elsewhere, keeping the diagonal at zero.
    pub fn apply(&mut self, update: impl FnOnce(&mut [f64])) {
        update(&mut self.values);
        self.zero_diagonal();
        debug_assert!(self.diagonal_is_zero());
    }
}
