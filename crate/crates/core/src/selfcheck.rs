//! Finite-difference verification of the analytic gradients, runnable from
//! the command line as well as from tests.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_many, Tape, Tensor, Var};
use crate::encoder::{recon_loss, MaskSpec, WindowGraph};
use crate::error::{Error, Result};
use crate::graph::{finalize_on_tape, infonce_predictive, AdjacencyParams};
use crate::nn::Bound;
use crate::rng::{substream, StreamRng};
use crate::signal::WindowedFeatures;
use crate::trainer::{
    pretrain_loss, ClipInput, IreneModel, LossVars, LossWeights, ModelConfig, ModelShape,
};

/// Relative error above which a check fails.
pub const TOLERANCE: f64 = 1e-4;

/// Central-difference step. Smaller steps let rounding dominate on the
/// redundancy term, whose gradients are tiny at initialization.
pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Individual tape primitives.
    Op,
    /// Every term of the pretraining objective and their sum.
    Loss,
    /// Encoder, decoder and head end to end.
    Model,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "loss" => Ok(Scope::Loss),
            "model" => Ok(Scope::Model),
            other => Err(Error::config(format!("unknown gradcheck scope {other}"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Loss => "loss",
            Scope::Model => "model",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub target: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn run(scope: Scope, eps: f64) -> Result<Vec<CheckResult>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config("eps must be positive"));
    }
    match scope {
        Scope::Op => op_suite(eps),
        Scope::Loss => loss_suite(eps),
        Scope::Model => model_suite(eps),
    }
}

fn randn(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(randn(&shape, &mut substream(seed, "gradcheck-weights")));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpCase = (
    &'static str,
    Vec<Vec<usize>>,
    fn(&mut Tape, &[Var]) -> Result<Var>,
);

fn op_suite(eps: f64) -> Result<Vec<CheckResult>> {
    let cases: Vec<OpCase> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }),
        ("mul", vec![vec![3, 2], vec![3, 2]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 2)
        }),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, 3)
        }),
        ("scale_by", vec![vec![3, 4], vec![]], |t, v| {
            let y = t.scale_by(v[0], v[1])?;
            weighted_sum(t, y, 4)
        }),
        ("relu", vec![vec![4, 4]], |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, 5)
        }),
        ("abs", vec![vec![4, 4]], |t, v| {
            let y = t.abs(v[0]);
            weighted_sum(t, y, 6)
        }),
        ("exp", vec![vec![2, 3]], |t, v| {
            let y = t.exp(v[0]);
            weighted_sum(t, y, 7)
        }),
        ("ln", vec![vec![2, 3]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let y = t.add_scalar(sq, 0.5);
            let y = t.ln(y);
            weighted_sum(t, y, 8)
        }),
        ("powf", vec![vec![2, 3]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let y = t.add_scalar(sq, 0.5);
            let y = t.powf(y, -0.5);
            weighted_sum(t, y, 9)
        }),
        ("sum_rows", vec![vec![3, 4]], |t, v| {
            let y = t.sum_rows(v[0]);
            weighted_sum(t, y, 10)
        }),
        ("sum_cols", vec![vec![3, 4]], |t, v| {
            let y = t.sum_cols(v[0]);
            weighted_sum(t, y, 11)
        }),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |t, v| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            weighted_sum(t, y, 12)
        }),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            weighted_sum(t, y, 13)
        }),
        ("gather_rows", vec![vec![4, 3]], |t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2])?;
            weighted_sum(t, y, 14)
        }),
        ("transpose", vec![vec![2, 5]], |t, v| {
            let y = t.transpose(v[0]);
            weighted_sum(t, y, 15)
        }),
        ("logsumexp", vec![vec![3, 4]], |t, v| Ok(t.logsumexp(v[0]))),
        ("logsumexp_rows", vec![vec![3, 4]], |t, v| {
            let y = t.logsumexp_rows(v[0]);
            weighted_sum(t, y, 16)
        }),
        ("softmax_rows", vec![vec![3, 5]], |t, v| {
            let y = t.softmax_rows(v[0]);
            weighted_sum(t, y, 17)
        }),
        ("layer_norm", vec![vec![4, 6], vec![6], vec![6]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 18)
        }),
        ("frobenius_sq", vec![vec![3, 4]], |t, v| {
            Ok(t.frobenius_sq(v[0]))
        }),
        ("mean", vec![vec![3, 3]], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        }),
    ];
    let mut rng = substream(0, "gradcheck-op");
    cases
        .into_iter()
        .map(|(name, shapes, f)| {
            let xs: Vec<Tensor> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
            Ok(CheckResult {
                target: name.to_string(),
                max_rel_error: grad_check_many(f, &xs, eps)?,
            })
        })
        .collect()
}

/// Two labeled clips of `T = 2` windows on `N = 4` nodes with `d = 8`
/// embedding width, plus a model sized to match.
pub struct Toy {
    pub model: IreneModel,
    pub features: Vec<WindowedFeatures>,
    pub labels: Vec<usize>,
    pub adjacency: Vec<AdjacencyParams>,
    pub masks: Vec<MaskSpec>,
    pub shuffle: Vec<usize>,
    pub weights: LossWeights,
}

impl Toy {
    pub fn new(seed: u64) -> Result<Self> {
        let (windows, nodes, dim) = (2, 4, 6);
        let mut config = ModelConfig::default();
        config.graph.top_k = 2;
        config.graph.pooled_dim = 4;
        config.graph.critic_hidden = 8;
        config.encoder.hidden = 8;
        config.encoder.blocks = 1;
        config.encoder.heads = 2;
        let shape = ModelShape {
            nodes,
            input_dim: dim,
            ib_classes: 2,
            head_classes: 2,
        };
        let model = IreneModel::new(&config, shape, seed)?;
        let mut rng = substream(seed, "gradcheck-toy");
        let features = (0..2)
            .map(|_| {
                let t = randn(&[windows * nodes * dim], &mut rng);
                WindowedFeatures::new(windows, nodes, dim, 1.0, t.into_data())
            })
            .collect::<Result<Vec<_>>>()?;
        let adjacency = (0..2)
            .map(|_| AdjacencyParams::random(windows, nodes, 1.0, &mut rng))
            .collect();
        let masks = (0..2)
            .map(|_| MaskSpec::draw(windows, nodes, 1, &mut rng))
            .collect();
        Ok(Toy {
            model,
            features,
            labels: vec![0, 1],
            adjacency,
            masks,
            shuffle: vec![1, 2, 3, 0],
            weights: LossWeights {
                lambda1: 0.5,
                lambda2: 0.7,
                lambda3: 0.3,
                lambda4: 1.0,
            },
        })
    }

    /// Every non-head parameter followed by every adjacency window.
    pub fn inputs(&self) -> Vec<Tensor> {
        let head = self.model.head_params();
        let mut xs: Vec<Tensor> = self
            .model
            .store
            .iter()
            .filter(|(id, _, _)| !head.contains(id))
            .map(|(_, _, t)| t.clone())
            .collect();
        for a in &self.adjacency {
            for t in 0..a.windows {
                xs.push(Tensor::matrix(a.nodes, a.nodes, a.window(t).to_vec()).expect("sized"));
            }
        }
        xs
    }

    /// Records the objective with `vars` (laid out like [`Toy::inputs`]).
    pub fn record(&self, tape: &mut Tape, vars: &[Var], w: LossWeights) -> Result<LossVars> {
        let head = self.model.head_params();
        let mut it = vars.iter().copied();
        let bound: Vec<Var> = self
            .model
            .store
            .iter()
            .map(|(id, _, t)| {
                if head.contains(&id) {
                    tape.constant(t.clone())
                } else {
                    it.next().expect("one var per parameter")
                }
            })
            .collect();
        let p = Bound::from_vars(bound);
        let n = self.model.shape.nodes;
        let mask = tape.constant(AdjacencyParams::off_diagonal_mask(n));
        let mut masked = Vec::new();
        for a in &self.adjacency {
            let mut m = Vec::with_capacity(a.windows);
            for _ in 0..a.windows {
                let raw = it.next().expect("one var per window");
                m.push(tape.mul(raw, mask)?);
            }
            masked.push(m);
        }
        let clips: Vec<ClipInput> = (0..self.features.len())
            .map(|c| ClipInput {
                features: &self.features[c],
                adjacency: &masked[c],
                label: Some(self.labels[c]),
                mask: &self.masks[c],
            })
            .collect();
        pretrain_loss(tape, &p, &self.model, &clips, &self.shuffle, w)
    }
}

fn loss_suite(eps: f64) -> Result<Vec<CheckResult>> {
    let toy = Toy::new(7)?;
    let xs = toy.inputs();
    type Pick = fn(&LossVars) -> Option<Var>;
    let targets: [(&str, Pick); 6] = [
        ("self_expressive", |l| Some(l.self_expressive)),
        ("infonce", |l| l.predictive),
        ("donsker_varadhan", |l| l.redundancy),
        ("smoothness", |l| Some(l.smoothness)),
        ("reconstruction", |l| l.recon),
        ("pretrain_total", |l| Some(l.total)),
    ];
    targets
        .iter()
        .map(|(name, pick)| {
            let err = grad_check_many(
                |tape, vars| {
                    let l = toy.record(tape, vars, toy.weights)?;
                    pick(&l).ok_or_else(|| Error::contract(format!("{name} was not recorded")))
                },
                &xs,
                eps,
            )?;
            Ok(CheckResult {
                target: name.to_string(),
                max_rel_error: err,
            })
        })
        .collect()
}

fn model_suite(eps: f64) -> Result<Vec<CheckResult>> {
    let toy = Toy::new(11)?;
    let model = &toy.model;
    let xs: Vec<Tensor> = model.store.iter().map(|(_, _, t)| t.clone()).collect();
    let features = &toy.features[0];
    let adjacency = &toy.adjacency[0];
    let mask = &toy.masks[0];
    let graphs = |tape: &mut Tape| -> Result<Vec<WindowGraph>> {
        (0..adjacency.windows)
            .map(|t| {
                let a = tape.constant(Tensor::matrix(
                    adjacency.nodes,
                    adjacency.nodes,
                    adjacency.window(t).to_vec(),
                )?);
                let f = finalize_on_tape(tape, a, model.config.graph.top_k, false)?;
                Ok(WindowGraph {
                    adjacency: f,
                    phi: f,
                })
            })
            .collect()
    };
    let mut out = Vec::new();
    let err = grad_check_many(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let (x, z) = model.embed(tape, &p, features)?;
            let g = graphs(tape)?;
            let zm = model.encoder.apply_mask(tape, &p, &z, mask)?;
            let h = model.encoder.encode(tape, &p, &zm, &g)?;
            let xhat = model.encoder.decode(tape, &p, &h, mask)?;
            recon_loss(tape, xhat, &x, mask)
        },
        &xs,
        eps,
    )?;
    out.push(CheckResult {
        target: "masked_autoencoder".into(),
        max_rel_error: err,
    });
    // the zero-initialized head output would leave the hidden layer without
    // gradient, so the check runs at a perturbed point
    let mut rng = substream(11, "gradcheck-head");
    let mut xs = xs;
    for id in model.head_params() {
        let shape = xs[id.0].shape().to_vec();
        xs[id.0] = randn(&shape, &mut rng);
    }
    let err = grad_check_many(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let (_, z) = model.embed(tape, &p, features)?;
            let g = graphs(tape)?;
            let h = model.encoder.encode(tape, &p, &z, &g)?;
            let logits = model.encoder.classify(tape, &p, &h)?;
            let nce = infonce_predictive(tape, logits, &[1])?;
            Ok(tape.scale(nce, -1.0))
        },
        &xs,
        eps,
    )?;
    out.push(CheckResult {
        target: "classifier".into(),
        max_rel_error: err,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scope_passes() {
        for scope in [Scope::Op, Scope::Loss, Scope::Model] {
            for r in run(scope, DEFAULT_EPS).unwrap() {
                assert!(r.passed(), "{scope} {}: {}", r.target, r.max_rel_error);
            }
        }
    }

    #[test]
    fn scope_parses_and_rejects_unknown() {
        assert_eq!("loss".parse::<Scope>().unwrap(), Scope::Loss);
        assert!("tape".parse::<Scope>().is_err());
        assert!(run(Scope::Op, 0.0).is_err());
    }
}
