use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Relative discrepancy used by every gradient check:
/// `|a - n| / max(1e-8, |a| + |n|)`, maximised over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of a flat parameter vector.
pub fn central_difference<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe)?;
        probe[i] = orig - eps;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

fn eval_scalar<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let out = tape.value(y);
    if out.len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Gradient check over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    tape.backward(y)?;
    let mut analytic = Vec::new();
    for (v, x) in vars.iter().zip(xs) {
        match tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, x.len())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut probe: Vec<Tensor> = xs.to_vec();
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// finite differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
