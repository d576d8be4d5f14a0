use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId};

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`.
pub fn gcn_normalize(tape: &mut Tape, adj: Var) -> Result<Var> {
    let (n, m) = tape.value(adj).dims2();
    if n != m {
        return Err(Error::contract("graph adjacency must be square"));
    }
    let eye = tape.constant(Tensor::identity(n));
    let with_loops = tape.add(adj, eye)?;
    let deg = tape.sum_rows(with_loops);
    let s = tape.powf(deg, -0.5);
    let st = tape.transpose(s);
    let outer = tape.matmul(s, st)?;
    tape.mul(with_loops, outer)
}

/// `relu(norm H W + b)` for a pre-normalized propagation matrix.
pub fn gcn_layer(tape: &mut Tape, p: &Bound, lin: &Linear, norm: Var, h: Var) -> Result<Var> {
    let agg = tape.matmul(norm, h)?;
    let y = lin.forward(tape, p, agg)?;
    Ok(tape.relu(y))
}

/// Query, key and value projections of one attention head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub dim: usize,
}

/// `softmax_rows(Q K^T / sqrt(d_h) + gamma * phi)`.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, gamma: Var, phi: Var) -> Result<Var> {
    let dh = tape.value(q).dims2().1;
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    let bias = tape.scale_by(phi, gamma)?;
    let logits = tape.add(logits, bias)?;
    Ok(tape.softmax_rows(logits))
}

/// Structure-biased attention over all node pairs; heads are concatenated.
pub fn gsa_attention(
    tape: &mut Tape,
    p: &Bound,
    heads: &[AttentionHead],
    gamma: Var,
    h: Var,
    phi: Var,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let q = tape.matmul(h, p[head.wq])?;
        let k = tape.matmul(h, p[head.wk])?;
        let v = tape.matmul(h, p[head.wv])?;
        let alpha = attention_weights(tape, q, k, gamma, phi)?;
        outs.push(tape.matmul(alpha, v)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    tape.concat_cols(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::{substream, StreamRng};
    use rand::Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut StreamRng) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn weights01(n: usize, rng: &mut StreamRng) -> Tensor {
        let mut t = Tensor::matrix(
            n,
            n,
            (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        for i in 0..n {
            t.data_mut()[i * n + i] = 0.0;
        }
        t
    }

    fn gcn_eval(adj: &Tensor, h: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
        let mut store = ParamStore::new();
        let (d_in, d_out) = w.dims2();
        let lin = Linear::zeroed(&mut store, "g", d_in, d_out);
        store
            .assign("g.weight", &[d_in, d_out], w.data().to_vec())
            .unwrap();
        store.assign("g.bias", &[d_out], b.to_vec()).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let a = tape.constant(adj.clone());
        let hv = tape.constant(h.clone());
        let norm = gcn_normalize(&mut tape, a).unwrap();
        let out = gcn_layer(&mut tape, &p, &lin, norm, hv).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn isolated_nodes_reduce_to_relu() {
        let mut rng = substream(1, "gcn");
        let h = rand_mat(4, 3, &mut rng);
        let out = gcn_eval(&Tensor::zeros(&[4, 4]), &h, &Tensor::identity(3), &[0.0; 3]);
        let expect: Vec<f64> = h.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(out.data(), expect.as_slice());
    }

    #[test]
    fn identical_connected_nodes_match() {
        let mut rng = substream(2, "gcn");
        let mut h = rand_mat(3, 2, &mut rng);
        let r0 = h.row(0).to_vec();
        h.data_mut()[2..4].copy_from_slice(&r0);
        let adj =
            Tensor::from_rows(&[&[0.0, 0.8, 0.0], &[0.8, 0.0, 0.0], &[0.0, 0.0, 0.0]]).unwrap();
        let w = rand_mat(2, 2, &mut rng);
        let out = gcn_eval(&adj, &h, &w, &[0.1, -0.1]);
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn three_node_case_matches_direct_arithmetic() {
        let mut rng = substream(3, "gcn");
        let adj = weights01(3, &mut rng);
        let h = rand_mat(3, 2, &mut rng);
        let w = rand_mat(2, 2, &mut rng);
        let b = [0.05, -0.2];
        let out = gcn_eval(&adj, &h, &w, &b);
        let hat = |i: usize, j: usize| adj.at(i, j) + if i == j { 1.0 } else { 0.0 };
        let deg: Vec<f64> = (0..3).map(|i| (0..3).map(|j| hat(i, j)).sum()).collect();
        for i in 0..3 {
            for (c, &bias) in b.iter().enumerate() {
                let mut acc = bias;
                for j in 0..3 {
                    let coef = hat(i, j) / (deg[i] * deg[j]).sqrt();
                    for k in 0..2 {
                        acc += coef * h.at(j, k) * w.at(k, c);
                    }
                }
                assert!((out.at(i, c) - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }

    fn attention_eval(q: &Tensor, k: &Tensor, gamma: f64, phi: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let kv = tape.constant(k.clone());
        let g = tape.constant(Tensor::scalar(gamma));
        let pv = tape.constant(phi.clone());
        let a = attention_weights(&mut tape, qv, kv, g, pv).unwrap();
        tape.value(a).clone()
    }

    #[test]
    fn zero_gamma_is_plain_scaled_dot_product() {
        let mut rng = substream(4, "attn");
        let q = rand_mat(5, 4, &mut rng);
        let k = rand_mat(5, 4, &mut rng);
        let phi = weights01(5, &mut rng);
        let got = attention_eval(&q, &k, 0.0, &phi);
        for i in 0..5 {
            let logits: Vec<f64> = (0..5)
                .map(|j| (0..4).map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / 2.0)
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                let want = (l - mx).exp() / z;
                assert!((got.at(i, j) - want).abs() <= 1e-12 * want.max(1e-300));
            }
        }
    }

    #[test]
    fn large_gamma_selects_the_one_hot_neighbor() {
        let n = 4;
        let gamma = 30.0;
        let mut phi = Tensor::zeros(&[n, n]);
        let pick = [2, 0, 3, 1];
        for (i, &j) in pick.iter().enumerate() {
            phi.data_mut()[i * n + j] = 1.0;
        }
        let zero = Tensor::zeros(&[n, 3]);
        let alpha = attention_eval(&zero, &zero, gamma, &phi);
        // the off-target mass is (n-1) / (e^gamma + n - 1)
        let tol = (n - 1) as f64 / (gamma.exp() + (n - 1) as f64);
        for (i, &j) in pick.iter().enumerate() {
            assert!((alpha.at(i, j) - 1.0).abs() <= tol * (1.0 + 1e-9));
        }
    }

    #[test]
    fn shifting_a_phi_row_leaves_weights_unchanged() {
        let mut rng = substream(5, "attn");
        let q = rand_mat(4, 3, &mut rng);
        let k = rand_mat(4, 3, &mut rng);
        let phi = weights01(4, &mut rng);
        let base = attention_eval(&q, &k, 1.3, &phi);
        let mut shifted = phi.clone();
        for j in 0..4 {
            shifted.data_mut()[4 + j] += 0.37;
        }
        let moved = attention_eval(&q, &k, 1.3, &shifted);
        for (a, b) in base.data().iter().zip(moved.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for i in 0..4 {
            let s: f64 = base.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(base.row(i).iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
}
