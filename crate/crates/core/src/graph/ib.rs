use rand::Rng;

use super::GraphConfig;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, Mlp, ParamId, ParamStore};
use crate::rng::StreamRng;

/// Shared per-channel map from spectral features to node embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureEncoder {
    pub linear: Linear,
}

impl FeatureEncoder {
    pub fn new(store: &mut ParamStore, inputs: usize, outputs: usize, rng: &mut StreamRng) -> Self {
        FeatureEncoder {
            linear: Linear::new(store, "f_theta", inputs, outputs, rng),
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        self.linear.params()
    }
}

/// Applies `f` row-wise to each window's `N x d_in` feature matrix.
pub fn embed_nodes(
    tape: &mut Tape,
    p: &Bound,
    f: &FeatureEncoder,
    windows: &[Var],
) -> Result<Vec<Var>> {
    windows
        .iter()
        .map(|x| f.linear.forward(tape, p, *x))
        .collect()
}

fn check_square(tape: &Tape, a: Var, n: usize) -> Result<()> {
    let shape = tape.value(a).shape();
    if shape != [n, n] {
        return Err(Error::contract(format!(
            "adjacency shape {shape:?}, expected [{n}, {n}]"
        )));
    }
    Ok(())
}

/// `sum_t ||Z_t - A_t^T Z_t||_F^2` with `Z_t` stored node-major (`N x d`), so
/// column `j` of `A_t` holds the coefficients reconstructing node `j`.
pub fn self_expressive_loss(tape: &mut Tape, z: &[Var], a: &[Var]) -> Result<Var> {
    if z.len() != a.len() {
        return Err(Error::contract(format!(
            "{} embedding windows but {} adjacency windows",
            z.len(),
            a.len()
        )));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (&zt, &at) in z.iter().zip(a) {
        let n = tape.value(zt).dims2().0;
        check_square(tape, at, n)?;
        let at_t = tape.transpose(at);
        let recon = tape.matmul(at_t, zt)?;
        let resid = tape.sub(zt, recon)?;
        let sq = tape.frobenius_sq(resid);
        total = tape.add(total, sq)?;
    }
    Ok(total)
}

/// `sum_{t>=1} ||A_t - A_{t-1}||_F^2`; zero for fewer than two windows.
pub fn smoothness_loss(tape: &mut Tape, a: &[Var]) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for pair in a.windows(2) {
        let d = tape.sub(pair[1], pair[0])?;
        let sq = tape.frobenius_sq(d);
        total = tape.add(total, sq)?;
    }
    Ok(total)
}

/// Stacks each flattened `N x N` window into a `B x N^2` matrix.
pub fn pool_adjacency(tape: &mut Tape, a: &[Var]) -> Result<Var> {
    let rows = a
        .iter()
        .map(|&m| {
            let len = tape.value(m).len();
            tape.reshape(m, vec![1, len])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Per-node mean of each `N x d` window, stacked into `B x N`.
pub fn pool_embeddings(tape: &mut Tape, z: &[Var]) -> Result<Var> {
    let rows = z
        .iter()
        .map(|&m| {
            let (n, d) = tape.value(m).dims2();
            let s = tape.sum_rows(m);
            let s = tape.scale(s, 1.0 / d as f64);
            tape.reshape(s, vec![1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Bilinear label scorer `g(A, y) = proj(vec A) M e_y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scorer {
    pub proj: Linear,
    pub bilinear: ParamId,
    pub labels: ParamId,
    pub classes: usize,
}

impl Scorer {
    pub fn new(
        store: &mut ParamStore,
        nodes: usize,
        classes: usize,
        dim: usize,
        rng: &mut StreamRng,
    ) -> Self {
        Scorer {
            proj: Linear::new(store, "scorer.proj", nodes * nodes, dim, rng),
            bilinear: store.add("scorer.bilinear", crate::nn::glorot(dim, dim, rng)),
            labels: store.add("scorer.labels", crate::nn::glorot(classes, dim, rng)),
            classes,
        }
    }

    /// Scores of every class for each pooled adjacency row: `B x C`.
    pub fn scores(&self, tape: &mut Tape, p: &Bound, pooled: Var) -> Result<Var> {
        let h = self.proj.forward(tape, p, pooled)?;
        let h = tape.matmul(h, p[self.bilinear])?;
        let e = tape.transpose(p[self.labels]);
        tape.matmul(h, e)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.proj.params().to_vec();
        v.extend([self.bilinear, self.labels]);
        v
    }
}

/// Two-layer critic on `[proj(vec A), mean-pooled Z]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Critic {
    pub proj: Linear,
    pub mlp: Mlp,
}

impl Critic {
    pub fn new(
        store: &mut ParamStore,
        nodes: usize,
        dim: usize,
        hidden: usize,
        rng: &mut StreamRng,
    ) -> Self {
        Critic {
            proj: Linear::new(store, "critic.proj", nodes * nodes, dim, rng),
            mlp: Mlp {
                hidden: Linear::new(store, "critic.hidden", dim + nodes, hidden, rng),
                output: Linear::new(store, "critic.output", hidden, 1, rng),
            },
        }
    }

    /// `B x 1` critic values for paired rows of `pooled_a` and `pooled_z`.
    pub fn score(&self, tape: &mut Tape, p: &Bound, pooled_a: Var, pooled_z: Var) -> Result<Var> {
        let h = self.proj.forward(tape, p, pooled_a)?;
        let x = tape.concat_cols(&[h, pooled_z])?;
        self.mlp.forward(tape, p, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.proj.params().to_vec();
        v.extend(self.mlp.params());
        v
    }
}

/// Contrastive estimate `mean_b [s(b, y_b) - log sum_c exp s(b, c)]` where
/// the columns of `scores` enumerate the candidate labels.
pub fn infonce_predictive(tape: &mut Tape, scores: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.value(scores).dims2();
    if c == 0 || tape.value(scores).is_empty() {
        return Err(Error::contract("candidate label set is empty"));
    }
    if labels.len() != b {
        return Err(Error::contract(format!(
            "{} labels for {b} score rows",
            labels.len()
        )));
    }
    let mut onehot = vec![0.0; b * c];
    for (row, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::config(format!("label {y} outside {c} candidates")));
        }
        onehot[row * c + y] = 1.0;
    }
    let onehot = tape.constant(Tensor::matrix(b, c, onehot)?);
    // per-row shifts leave each term unchanged and make a uniform row
    // evaluate to exactly -ln c
    let mut shift = Vec::with_capacity(b * c);
    for row in tape.value(scores).data().chunks(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(m, c));
    }
    let shift = tape.constant(Tensor::matrix(b, c, shift)?);
    let shifted = tape.sub(scores, shift)?;
    let picked = tape.mul(shifted, onehot)?;
    let ones = tape.constant(Tensor::full(&[c, 1], 1.0));
    let picked = tape.matmul(picked, ones)?;
    let lse = tape.logsumexp_rows(shifted);
    let terms = tape.sub(picked, lse)?;
    Ok(anchored_mean(tape, terms))
}

/// Mean taken as `x_0 + mean(x - x_0)`, exact when all entries agree. The
/// anchor is a constant; its gradient contributions would cancel anyway.
fn anchored_mean(tape: &mut Tape, x: Var) -> Var {
    let x0 = tape.value(x).data()[0];
    let centered = tape.add_scalar(x, -x0);
    let m = tape.mean(centered);
    tape.add_scalar(m, x0)
}

/// Donsker-Varadhan estimate `mean(T_joint) - log mean(exp T_shuffled)`.
pub fn dv_redundancy(tape: &mut Tape, joint: Var, shuffled: Var) -> Result<Var> {
    let b = tape.value(joint).len();
    if b < 2 {
        return Err(Error::contract(
            "redundancy estimate needs a batch of at least 2",
        ));
    }
    if tape.value(shuffled).len() != b {
        return Err(Error::contract("joint and shuffled batches differ in size"));
    }
    // both terms are shifted by the largest shuffled score, so a constant
    // critic gives exactly 0
    let top = tape
        .value(shuffled)
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let joint = tape.add_scalar(joint, -top);
    let shuffled = tape.add_scalar(shuffled, -top);
    let m = tape.mean(joint);
    let lse = tape.logsumexp(shuffled);
    let log_mean = tape.add_scalar(lse, -(b as f64).ln());
    tape.sub(m, log_mean)
}

/// Uniform random cyclic permutation (no fixed points) for `n >= 2`.
pub fn sattolo(n: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Label scorer and redundancy critic sharing one parameter store.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IbHeads {
    pub scorer: Scorer,
    pub critic: Critic,
}

impl IbHeads {
    pub fn new(
        store: &mut ParamStore,
        nodes: usize,
        classes: usize,
        cfg: &GraphConfig,
        rng: &mut StreamRng,
    ) -> Self {
        IbHeads {
            scorer: Scorer::new(store, nodes, classes.max(1), cfg.pooled_dim, rng),
            critic: Critic::new(store, nodes, cfg.pooled_dim, cfg.critic_hidden, rng),
        }
    }
}

/// Per-window inputs for one batch of the graph objective.
pub struct IbWindows<'a> {
    /// `N x d` embeddings.
    pub z: &'a [Var],
    /// Masked `N x N` adjacencies.
    pub a: &'a [Var],
    /// Class of each window; `None` drops the predictive term.
    pub labels: Option<&'a [usize]>,
    /// Pairing used for the product-of-marginals sample.
    pub shuffle: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct IbTerms {
    pub total: Var,
    pub self_expressive: Var,
    pub redundancy: Option<Var>,
    pub predictive: Option<Var>,
}

/// Redundancy (DV) and predictive (InfoNCE) estimates for a batch of
/// windows; each is recorded only when requested.
pub fn mi_terms(
    tape: &mut Tape,
    p: &Bound,
    heads: &IbHeads,
    w: &IbWindows,
    redundancy: bool,
    predictive: bool,
) -> Result<(Option<Var>, Option<Var>)> {
    let predictive = predictive && w.labels.is_some();
    if !redundancy && !predictive {
        return Ok((None, None));
    }
    let pooled_a = pool_adjacency(tape, w.a)?;
    let mut dv = None;
    let mut nce = None;
    if redundancy {
        if w.shuffle.len() != w.z.len() {
            return Err(Error::contract("shuffle length differs from window count"));
        }
        let pooled_z = pool_embeddings(tape, w.z)?;
        let shuffled_z = tape.gather_rows(pooled_z, w.shuffle)?;
        let joint = heads.critic.score(tape, p, pooled_a, pooled_z)?;
        let marg = heads.critic.score(tape, p, pooled_a, shuffled_z)?;
        dv = Some(dv_redundancy(tape, joint, marg)?);
    }
    if let Some(labels) = w.labels.filter(|_| predictive) {
        let scores = heads.scorer.scores(tape, p, pooled_a)?;
        nce = Some(infonce_predictive(tape, scores, labels)?);
    }
    Ok((dv, nce))
}

/// `self_expressive + lambda1 * redundancy - lambda2 * predictive`. Terms
/// whose weight is zero are not recorded at all.
pub fn ib_graph_loss(
    tape: &mut Tape,
    p: &Bound,
    heads: &IbHeads,
    w: &IbWindows,
    lambda1: f64,
    lambda2: f64,
) -> Result<IbTerms> {
    let se = self_expressive_loss(tape, w.z, w.a)?;
    let (redundancy, predictive) = mi_terms(tape, p, heads, w, lambda1 != 0.0, lambda2 != 0.0)?;
    let mut total = se;
    if let Some(dv) = redundancy {
        let weighted = tape.scale(dv, lambda1);
        total = tape.add(total, weighted)?;
    }
    if let Some(nce) = predictive {
        let weighted = tape.scale(nce, lambda2);
        total = tape.sub(total, weighted)?;
    }
    Ok(IbTerms {
        total,
        self_expressive: se,
        redundancy,
        predictive,
    })
}
