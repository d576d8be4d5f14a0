use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleByVar(Var, Var),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    LogSumExp(Var),
    LogSumExpRows(Var),
    FrobeniusSq(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of a forward pass.
///
/// Nodes are appended in evaluation order, so backward simply walks the node
/// list in reverse. Gradients of leaves accumulate across [`Tape::backward`]
/// calls until [`Tape::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and its saved activations.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            assert!(
                !inputs_finite,
                "non-finite output from finite inputs in {op:?}"
            );
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary_map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same size");
        self.push(value, op, &[a])
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.len() != tb.len() || ta.dims2() != tb.dims2() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.dims2();
        let (k2, n) = tb.dims2();
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::Matmul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, n) = ta.dims2();
        if tb.len() != n {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            data[i * n..(i + 1) * n]
                .iter_mut()
                .zip(tb.data())
                .for_each(|(x, y)| *x += y);
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary_map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary_map(a, |x| x + c, Op::AddScalar(a))
    }

    /// Multiplies `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = &self.nodes[s.0].value;
        if ts.len() != 1 {
            let ta = &self.nodes[a.0].value;
            return Err(shape_err("scale_by", ta, ts));
        }
        let c = ts.item();
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x * c).collect(),
        )?;
        Ok(self.push(value, Op::ScaleByVar(a, s), &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary_map(a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary_map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary_map(a, f64::ln, Op::Ln(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary_map(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Row sums as an `m x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let data = (0..m)
            .map(|i| t.data()[i * n..(i + 1) * n].iter().sum())
            .collect();
        let value = Tensor::matrix(m, 1, data).expect("sized");
        self.push(value, Op::SumRows(a), &[a])
    }

    /// Column sums as a `1 x n` row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let mut data = vec![0.0; n];
        for i in 0..m {
            data.iter_mut()
                .zip(&t.data()[i * n..(i + 1) * n])
                .for_each(|(o, x)| *o += x);
        }
        let value = Tensor::matrix(1, n, data).expect("sized");
        self.push(value, Op::SumCols(a), &[a])
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (_, n) = self.nodes[first.0].value.dims2();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let (m, c) = t.dims2();
            if c != n {
                return Err(shape_err("concat_rows", &self.nodes[first.0].value, t));
            }
            data.extend_from_slice(t.data());
            rows += m;
        }
        let value = Tensor::matrix(rows, n, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let (m, _) = self.nodes[first.0].value.dims2();
        let mut total = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.dims2().0 != m {
                return Err(shape_err("concat_cols", &self.nodes[first.0].value, t));
            }
            total += t.dims2().1;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let value = Tensor::matrix(m, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!("gather row {bad} out of {m}")));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(idx.len(), n, data)?;
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        let value = Tensor::new(value.shape().to_vec(), value.into_data())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transposed();
        self.push(value, Op::Transpose(a), &[a])
    }

    /// `log(sum(exp(a)))` over all entries, max-shifted.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let s = logsumexp(self.nodes[a.0].value.data());
        self.push(Tensor::scalar(s), Op::LogSumExp(a), &[a])
    }

    /// Per-row log-sum-exp as an `m x 1` column.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, _) = t.dims2();
        let data = (0..m).map(|i| logsumexp(t.row(i))).collect();
        let value = Tensor::matrix(m, 1, data).expect("sized");
        self.push(value, Op::LogSumExpRows(a), &[a])
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().map(|x| x * x).sum();
        self.push(Tensor::scalar(s), Op::FrobeniusSq(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.dims2();
        let mut data = t.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same size");
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance followed by
    /// an affine map with `gain` and `bias` (both of length `d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let (m, d) = tx.dims2();
        if tg.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != d {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = tx.row(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mu) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Backpropagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let t = &self.nodes[loss.0].value;
        if t.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Backpropagates explicit upstream gradients for one or more outputs.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            if g.len() != self.nodes[v.0].value.len() {
                return Err(Error::contract("seed gradient size mismatch"));
            }
            add_into(&mut grads[v.0], g);
            start = start.max(v.0);
        }
        for i in (0..=start).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = val(*a).dims2();
                let (_, n) = val(*b).dims2();
                if self.wants(*a) {
                    let bt = val(*b).transposed();
                    let da = matmul_raw(g, bt.data(), m, n, k);
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let at = val(*a).transposed();
                    let db = matmul_raw(at.data(), g, k, m, n);
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da: Vec<f64> = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let db: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let n = val(*b).len();
                    let mut db = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        db.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::AddScalar(a) => add_into(&mut grads[a.0], g),
            Op::ScaleByVar(a, s) => {
                let c = val(*s).item();
                if self.wants(*a) {
                    let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*s) {
                    let ds: f64 = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    add_into(&mut grads[s.0], &[ds]);
                }
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Abs(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, &y)| {
                        if y > 0.0 {
                            *x
                        } else if y < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = g.iter().zip(out).map(|(x, y)| x * y).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Ln(a) => {
                let da: Vec<f64> = g.iter().zip(val(*a).data()).map(|(x, y)| x / y).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Powf(a, p) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, y)| x * p * y.powf(p - 1.0))
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; val(*a).len()];
                add_into(&mut grads[a.0], &da);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let da = vec![g[0] / n as f64; n];
                add_into(&mut grads[a.0], &da);
            }
            Op::SumRows(a) => {
                let (m, n) = val(*a).dims2();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    da[r * n..(r + 1) * n].iter_mut().for_each(|x| *x = g[r]);
                }
                add_into(&mut grads[a.0], &da);
            }
            Op::SumCols(a) => {
                let (m, n) = val(*a).dims2();
                let mut da = Vec::with_capacity(m * n);
                for _ in 0..m {
                    da.extend_from_slice(g);
                }
                add_into(&mut grads[a.0], &da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    if self.wants(*p) {
                        add_into(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2();
                let mut col = 0;
                for p in parts {
                    let (_, c) = val(*p).dims2();
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(m * c);
                        for r in 0..m {
                            dp.extend_from_slice(&g[r * total + col..r * total + col + c]);
                        }
                        add_into(&mut grads[p.0], &dp);
                    }
                    col += c;
                }
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = val(*a).dims2();
                let mut da = vec![0.0; m * n];
                for (r, &src) in idx.iter().enumerate() {
                    da[src * n..(src + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(o, x)| *o += x);
                }
                add_into(&mut grads[a.0], &da);
            }
            Op::Reshape(a) => add_into(&mut grads[a.0], g),
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2();
                let gt = Tensor::matrix(r, c, g.to_vec())
                    .expect("sized")
                    .transposed();
                add_into(&mut grads[a.0], gt.data());
            }
            Op::LogSumExp(a) => {
                let lse = out[0];
                let da: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .map(|x| g[0] * (x - lse).exp())
                    .collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::LogSumExpRows(a) => {
                let ta = val(*a);
                let (m, n) = ta.dims2();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = g[r] * (ta.data()[r * n + c] - out[r]).exp();
                    }
                }
                add_into(&mut grads[a.0], &da);
            }
            Op::FrobeniusSq(a) => {
                let da: Vec<f64> = val(*a).data().iter().map(|x| 2.0 * x * g[0]).collect();
                add_into(&mut grads[a.0], &da);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let y = &out[r * n..(r + 1) * n];
                    let gy = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        da[r * n + c] = y[c] * (gy[c] - dot);
                    }
                }
                add_into(&mut grads[a.0], &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, d) = node.value.dims2();
                let gn = val(*gain).data();
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..m {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    add_into(&mut grads[gain.0], &dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..m {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                    add_into(&mut grads[bias.0], &db);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * d];
                    let nf = d as f64;
                    for r in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            let dh = g[r * d + c] * gn[c];
                            s1 += dh;
                            s2 += dh * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let dh = g[r * d + c] * gn[c];
                            dx[r * d + c] = inv_std[r] / nf * (nf * dh - s1 - xhat[r * d + c] * s2);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}
