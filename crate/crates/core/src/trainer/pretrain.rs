use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{featurize_dataset, CheckpointMeta, IreneModel, ModelShape, Stage};
use super::{ridge_probe_scores, EarlyStop, PipelineConfig, TrainConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{recon_loss, Checkpoint, MaskSpec};
use crate::error::{Error, Result};
use crate::graph::{
    finalize_on_tape, mi_terms, ridge_coefficients, sattolo, self_expressive_loss, smoothness_loss,
    AdjacencyParams, GraphConfig, IbWindows,
};
use crate::metrics::auroc;
use crate::nn::{Bound, Grads, ParamId};
use crate::optim::{Adam, AdamMoments};
use crate::rng::{substream, substream_indexed};
use crate::signal::{Dataset, NormStats, WindowedFeatures};

/// Coefficients of the redundancy, predictive, smoothness and
/// reconstruction terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl LossWeights {
    pub fn new(graph: &GraphConfig, train: &TrainConfig) -> Self {
        LossWeights {
            lambda1: graph.lambda1,
            lambda2: graph.lambda2,
            lambda3: train.lambda3,
            lambda4: train.lambda4,
        }
    }
}

/// One clip of a batch as the loss sees it.
pub struct ClipInput<'a> {
    pub features: &'a WindowedFeatures,
    /// Masked per-window adjacency handles.
    pub adjacency: &'a [Var],
    pub label: Option<usize>,
    pub mask: &'a MaskSpec,
}

/// Tape handles of every recorded term. Terms with zero weight are absent.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub self_expressive: Var,
    pub smoothness: Var,
    pub redundancy: Option<Var>,
    pub predictive: Option<Var>,
    pub recon: Option<Var>,
}

/// Stage-one objective of a batch. Per-clip terms are averaged over clips;
/// the two mutual-information estimates pool every window of the batch.
pub fn pretrain_loss(
    tape: &mut Tape,
    p: &Bound,
    model: &IreneModel,
    clips: &[ClipInput],
    shuffle: &[usize],
    w: LossWeights,
) -> Result<LossVars> {
    if clips.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let g = &model.config.graph;
    let inv_b = 1.0 / clips.len() as f64;
    let mut all_z = Vec::new();
    let mut all_a = Vec::new();
    let mut window_labels = Some(Vec::new());
    let mut se = tape.constant(Tensor::scalar(0.0));
    let mut smooth = tape.constant(Tensor::scalar(0.0));
    let mut recon = None;
    for c in clips {
        let (x, z) = model.embed(tape, p, c.features)?;
        let s = self_expressive_loss(tape, &z, c.adjacency)?;
        se = tape.add(se, s)?;
        let s = smoothness_loss(tape, c.adjacency)?;
        smooth = tape.add(smooth, s)?;
        if w.lambda4 != 0.0 && !c.mask.is_empty() {
            let graphs = c
                .adjacency
                .iter()
                .map(|&a| {
                    let f = finalize_on_tape(tape, a, g.top_k, g.binarize)?;
                    Ok(crate::encoder::WindowGraph {
                        adjacency: f,
                        phi: f,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let zm = model.encoder.apply_mask(tape, p, &z, c.mask)?;
            let h = model.encoder.encode(tape, p, &zm, &graphs)?;
            let xhat = model.encoder.decode(tape, p, &h, c.mask)?;
            let r = recon_loss(tape, xhat, &x, c.mask)?;
            recon = Some(match recon {
                Some(acc) => tape.add(acc, r)?,
                None => r,
            });
        }
        match (&mut window_labels, c.label) {
            (Some(v), Some(y)) => v.extend(std::iter::repeat_n(y, z.len())),
            (labels, _) => *labels = None,
        }
        all_a.extend_from_slice(c.adjacency);
        all_z.extend(z);
    }
    let se = tape.scale(se, inv_b);
    let smooth = tape.scale(smooth, inv_b);
    let recon = recon.map(|r| tape.scale(r, inv_b));
    let windows = IbWindows {
        z: &all_z,
        a: &all_a,
        labels: window_labels.as_deref(),
        shuffle,
    };
    let (redundancy, predictive) = mi_terms(
        tape,
        p,
        &model.heads,
        &windows,
        w.lambda1 != 0.0 && all_z.len() >= 2,
        w.lambda2 != 0.0,
    )?;
    let mut total = se;
    if let Some(dv) = redundancy {
        let t = tape.scale(dv, w.lambda1);
        total = tape.add(total, t)?;
    }
    if let Some(nce) = predictive {
        let t = tape.scale(nce, w.lambda2);
        total = tape.sub(total, t)?;
    }
    if w.lambda3 != 0.0 {
        let t = tape.scale(smooth, w.lambda3);
        total = tape.add(total, t)?;
    }
    if let Some(r) = recon {
        let t = tape.scale(r, w.lambda4);
        total = tape.add(total, t)?;
    }
    Ok(LossVars {
        total,
        self_expressive: se,
        smoothness: smooth,
        redundancy,
        predictive,
        recon,
    })
}

/// Values of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub total: f64,
    pub self_expressive: f64,
    pub smoothness: f64,
    pub redundancy: Option<f64>,
    pub predictive: Option<f64>,
    pub recon: Option<f64>,
}

/// Mutable training state: model, per-clip adjacency and optimizer moments.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub model: IreneModel,
    pub config: TrainConfig,
    pub features: Vec<WindowedFeatures>,
    pub labels: Option<Vec<usize>>,
    /// Free adjacency of every clip, indexed like `features`.
    pub adjacency: Vec<AdjacencyParams>,
    main: Adam,
    critic: Adam,
    adjacency_moments: Vec<AdamMoments>,
    steps: usize,
    last_finite: f64,
}

impl Pretrainer {
    pub fn new(
        model: IreneModel,
        config: TrainConfig,
        features: Vec<WindowedFeatures>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        config.validate()?;
        if features.is_empty() {
            return Err(Error::data("no clips to pretrain on"));
        }
        if labels.as_ref().is_some_and(|l| l.len() != features.len()) {
            return Err(Error::contract("label count differs from clip count"));
        }
        let adjacency = features
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut rng = substream_indexed(config.seed, "adjacency", i as u64);
                AdjacencyParams::random(f.windows, f.nodes, ADJACENCY_INIT, &mut rng)
            })
            .collect::<Vec<_>>();
        let adjacency_moments = adjacency
            .iter()
            .map(|a| AdamMoments::new(a.values.len()))
            .collect();
        Ok(Pretrainer {
            main: Adam::new(config.adam()),
            critic: Adam::new(config.adam()),
            model,
            config,
            features,
            labels,
            adjacency,
            adjacency_moments,
            steps: 0,
            last_finite: f64::NAN,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::new(&self.model.config.graph, &self.config)
    }

    /// Masks and window pairing for step `step` of `batch`.
    pub fn draw(&self, batch: &[usize], step: usize) -> (Vec<MaskSpec>, Vec<usize>) {
        let nodes = self.model.shape.nodes;
        let count = self.model.config.encoder.mask_count(nodes);
        let mut rng = substream_indexed(self.config.seed, "mask", step as u64);
        let masks = batch
            .iter()
            .map(|&c| MaskSpec::draw(self.features[c].windows, nodes, count, &mut rng))
            .collect();
        let windows: usize = batch.iter().map(|&c| self.features[c].windows).sum();
        let shuffle = if windows >= 2 {
            sattolo(
                windows,
                &mut substream_indexed(self.config.seed, "shuffle", step as u64),
            )
        } else {
            (0..windows).collect()
        };
        (masks, shuffle)
    }

    /// Records the objective of `batch` on `tape`; returns the bound
    /// parameters, raw adjacency leaves per clip, and the loss handles.
    pub fn record(
        &self,
        tape: &mut Tape,
        batch: &[usize],
        step: usize,
    ) -> Result<(Bound, Vec<Vec<Var>>, LossVars)> {
        let head = self.model.head_params();
        let p = self.model.store.bind(tape, |id| !head.contains(&id));
        let mut raw = Vec::with_capacity(batch.len());
        let mut masked = Vec::with_capacity(batch.len());
        for &c in batch {
            let (r, m) = self.adjacency[c].bind(tape, true)?;
            raw.push(r);
            masked.push(m);
        }
        let (masks, shuffle) = self.draw(batch, step);
        let clips: Vec<ClipInput> = batch
            .iter()
            .enumerate()
            .map(|(i, &c)| ClipInput {
                features: &self.features[c],
                adjacency: &masked[i],
                label: self.labels.as_ref().map(|l| l[c]),
                mask: &masks[i],
            })
            .collect();
        let vars = pretrain_loss(tape, &p, &self.model, &clips, &shuffle, self.weights())?;
        Ok((p, raw, vars))
    }

    /// One update of every non-critic parameter and of the batch's
    /// adjacency, followed by one ascent step of the critic.
    pub fn step(&mut self, batch: &[usize]) -> Result<StepLosses> {
        let step = self.steps;
        let mut tape = Tape::new();
        let (p, raw, vars) = self.record(&mut tape, batch, step)?;
        let value = |v: Option<Var>| v.map(|v| tape.scalar_value(v));
        let losses = StepLosses {
            step,
            total: tape.scalar_value(vars.total),
            self_expressive: tape.scalar_value(vars.self_expressive),
            smoothness: tape.scalar_value(vars.smoothness),
            redundancy: value(vars.redundancy),
            predictive: value(vars.predictive),
            recon: value(vars.recon),
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                last_finite: self.last_finite,
            });
        }
        tape.backward(vars.total)?;
        let critic_ids = self.model.critic_params();
        let mut main = p.grads(&tape);
        for &id in &critic_ids {
            main.clear(id);
        }
        let adjacency_grads: Vec<Vec<f64>> = batch
            .iter()
            .zip(&raw)
            .map(|(&c, r)| self.adjacency[c].collect_grad(&tape, r))
            .collect();
        let critic = match vars.redundancy {
            Some(dv) => {
                tape.zero_grad();
                let ascent = tape.scale(dv, -1.0);
                tape.backward(ascent)?;
                Some(only(&p.grads(&tape), &critic_ids))
            }
            None => None,
        };

        self.main.step(&mut self.model.store, &main);
        if let Some(g) = critic {
            self.critic.step(&mut self.model.store, &g);
        }
        let cfg = self.config.adjacency_adam();
        for (&c, g) in batch.iter().zip(&adjacency_grads) {
            let moments = &mut self.adjacency_moments[c];
            self.adjacency[c].apply(|v| moments.update(&cfg, v, g));
        }
        self.steps += 1;
        self.last_finite = losses.total;
        Ok(losses)
    }
}

const ADJACENCY_INIT: f64 = 0.1;

fn only(g: &Grads, keep: &[ParamId]) -> Grads {
    let mut out = Grads::empty(g.slots.len());
    for &id in keep {
        out.slots[id.0] = g.slots[id.0].clone();
    }
    out
}

/// Seeded train/validation split; both halves are returned sorted.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "split"));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Means of the step losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub total: f64,
    pub self_expressive: f64,
    pub smoothness: f64,
    pub redundancy: Option<f64>,
    pub predictive: Option<f64>,
    pub recon: Option<f64>,
    /// `probe_auroc`, `neg_val_loss` or `neg_train_loss`.
    pub val_metric: String,
    pub val_score: f64,
    pub kept: bool,
}

fn mean_of(losses: &[StepLosses], f: impl Fn(&StepLosses) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = losses.iter().filter_map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Best snapshot of a pretraining run plus everything needed to save it.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: IreneModel,
    pub config: PipelineConfig,
    pub norm: NormStats,
    /// Learned adjacency of each training clip, keyed by dataset index.
    pub adjacency: Vec<(usize, AdjacencyParams)>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub best_val_auroc: Option<f64>,
    pub logs: Vec<EpochLog>,
    pub class_names: Vec<String>,
    pub window_seconds: f64,
    pub clip_seconds: u32,
}

impl PretrainOutcome {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            stage: Stage::Pretrain,
            config: self.config.clone(),
            shape: self.model.shape,
            norm: self.norm.clone(),
            class_names: self.class_names.clone(),
            window_seconds: self.window_seconds,
            clip_seconds: self.clip_seconds,
            seed: self.config.train.seed,
            epoch: self.best_epoch,
            best_val_auroc: self.best_val_auroc,
            task: None,
            adjacency_clips: Vec::new(),
        }
    }

    pub fn checkpoint(&self, with_adjacency: bool) -> Result<Checkpoint> {
        let adjacency: &[(usize, AdjacencyParams)] =
            if with_adjacency { &self.adjacency } else { &[] };
        self.model.to_checkpoint(&self.meta(), adjacency)
    }
}

/// Detection targets (`label > 0`) when both classes occur.
fn binary_targets(labels: &[usize], idx: &[usize]) -> Option<Vec<bool>> {
    let t: Vec<bool> = idx.iter().map(|&i| labels[i] > 0).collect();
    (t.iter().any(|&x| x) && t.iter().any(|&x| !x)).then_some(t)
}

/// Linear-probe AUROC of pooled embeddings, when labels allow it.
fn probe_auroc(tr: &Pretrainer, train: &[usize], val: &[usize]) -> Result<Option<f64>> {
    let Some(labels) = &tr.labels else {
        return Ok(None);
    };
    let (Some(yt), Some(yv)) = (binary_targets(labels, train), binary_targets(labels, val)) else {
        return Ok(None);
    };
    let embed = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
        idx.par_iter()
            .map(|&c| tr.model.pooled_embedding(&tr.features[c]))
            .collect()
    };
    let xt = embed(train)?;
    let xv = embed(val)?;
    let scores = ridge_probe_scores(&xt, &yt, &xv, tr.config.probe_ridge)?;
    Ok(Some(auroc(&yv, &scores)?))
}

/// Label-free validation loss: self-expression with the closed-form graph
/// plus masked reconstruction on the inference graphs.
pub fn validation_loss(tr: &Pretrainer, idx: &[usize]) -> Result<f64> {
    let model = &tr.model;
    let nodes = model.shape.nodes;
    let count = model.config.encoder.mask_count(nodes);
    let lambda4 = tr.config.lambda4;
    let per_clip = idx
        .par_iter()
        .map(|&c| {
            let f = &tr.features[c];
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape, |_| false);
            let (x, z) = model.embed(&mut tape, &p, f)?;
            let mut a = Vec::with_capacity(z.len());
            for &zt in &z {
                let coef = ridge_coefficients(tape.value(zt), model.config.graph.ridge_alpha)?;
                a.push(tape.constant(Tensor::matrix(nodes, nodes, coef)?));
            }
            let se = self_expressive_loss(&mut tape, &z, &a)?;
            let mut loss = tape.scalar_value(se);
            if lambda4 != 0.0 && count > 0 {
                let mask = MaskSpec::draw(
                    f.windows,
                    nodes,
                    count,
                    &mut substream_indexed(tr.config.seed, "val-mask", c as u64),
                );
                let graphs = model.inference_graphs(f)?;
                let gv = IreneModel::graph_vars(&mut tape, &graphs);
                let zm = model.encoder.apply_mask(&mut tape, &p, &z, &mask)?;
                let h = model.encoder.encode(&mut tape, &p, &zm, &gv)?;
                let xhat = model.encoder.decode(&mut tape, &p, &h, &mask)?;
                let r = recon_loss(&mut tape, xhat, &x, &mask)?;
                loss += lambda4 * tape.scalar_value(r);
            }
            Ok(loss)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_clip.iter().sum::<f64>() / per_clip.len().max(1) as f64)
}

/// Stage one on a whole dataset: featurize, split, normalize with training
/// statistics, then train with early stopping. `on_epoch` sees every epoch.
pub fn pretrain(
    dataset: &Dataset,
    config: &PipelineConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    config.validate(dataset.channels)?;
    if dataset.clips.is_empty() {
        return Err(Error::data("dataset has no clips"));
    }
    let tc = &config.train;
    let mut features = featurize_dataset(dataset)?;
    let (train, val) = split_indices(features.len(), tc.val_fraction, tc.seed);
    let fit: Vec<WindowedFeatures> = train.iter().map(|&i| features[i].clone()).collect();
    let norm = NormStats::fit(&fit)?;
    norm.apply_all(&mut features)?;
    let labels = dataset
        .labels()
        .map(|v| v.into_iter().map(usize::from).collect::<Vec<_>>());
    let shape = ModelShape {
        nodes: dataset.channels,
        input_dim: features[0].dim,
        ib_classes: dataset.class_names.len().max(1),
        head_classes: 2,
    };
    let model = IreneModel::new(&config.model, shape, tc.seed)?;
    let mut tr = Pretrainer::new(model, tc.clone(), features, labels)?;

    let mut stop = EarlyStop::new(tc.patience);
    let mut best = (
        tr.model.store.clone(),
        tr.adjacency.clone(),
        0usize,
        f64::NEG_INFINITY,
        None,
    );
    let mut logs = Vec::new();
    for epoch in 0..tc.max_epochs {
        let mut order = train.clone();
        order.shuffle(&mut substream_indexed(tc.seed, "epoch", epoch as u64));
        let mut losses = Vec::new();
        for batch in order.chunks(tc.train_batch) {
            losses.push(tr.step(batch)?);
        }
        let auroc = if val.is_empty() {
            None
        } else {
            probe_auroc(&tr, &train, &val)?
        };
        let (metric, score) = match auroc {
            Some(a) => ("probe_auroc", a),
            None if !val.is_empty() => ("neg_val_loss", -validation_loss(&tr, &val)?),
            None => (
                "neg_train_loss",
                -mean_of(&losses, |l| Some(l.total)).unwrap_or(0.0),
            ),
        };
        let kept = stop.observe(score);
        if kept {
            best = (
                tr.model.store.clone(),
                tr.adjacency.clone(),
                epoch,
                score,
                auroc,
            );
        }
        let log = EpochLog {
            epoch,
            seed: tc.seed,
            lr: tc.lr,
            steps: losses.len(),
            total: mean_of(&losses, |l| Some(l.total)).unwrap_or(0.0),
            self_expressive: mean_of(&losses, |l| Some(l.self_expressive)).unwrap_or(0.0),
            smoothness: mean_of(&losses, |l| Some(l.smoothness)).unwrap_or(0.0),
            redundancy: mean_of(&losses, |l| l.redundancy),
            predictive: mean_of(&losses, |l| l.predictive),
            recon: mean_of(&losses, |l| l.recon),
            val_metric: metric.to_string(),
            val_score: score,
            kept,
        };
        log::info!(
            "pretrain epoch {epoch}: loss {:.5}, {metric} {score:.4}",
            log.total
        );
        on_epoch(&log);
        logs.push(log);
        if stop.exhausted() {
            break;
        }
    }
    let (store, adjacency, best_epoch, best_score, best_val_auroc) = best;
    let mut model = tr.model;
    model.store = store;
    Ok(PretrainOutcome {
        model,
        config: config.clone(),
        norm,
        adjacency: train.iter().map(|&i| (i, adjacency[i].clone())).collect(),
        train_indices: train,
        val_indices: val,
        best_epoch,
        best_score,
        best_val_auroc,
        logs,
        class_names: dataset.class_names.clone(),
        window_seconds: dataset.window_seconds,
        clip_seconds: dataset.clip_seconds,
    })
}
