use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{featurize_dataset, CheckpointMeta, IreneModel, ModelShape, Stage};
use super::pretrain::split_indices;
use super::{EarlyStop, TrainConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::infonce_predictive;
use crate::metrics::{auroc, auroc_macro, EvalResult, Task};
use crate::nn::{Bound, ParamId};
use crate::optim::Adam;
use crate::rng::substream_indexed;
use crate::signal::{balance_undersample, Dataset, WindowedFeatures};

/// Clips taking part in `task`, their targets and the number of classes.
/// Detection maps every seizure class to 1; classification keeps seizure
/// clips only and shifts their labels down by one.
pub fn task_labels(
    labels: &[u8],
    class_count: usize,
    task: Task,
) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    if let Some(&bad) = labels.iter().find(|&&y| usize::from(y) >= class_count) {
        return Err(Error::config(format!(
            "label {bad} outside {class_count} classes"
        )));
    }
    let (idx, targets, classes): (Vec<usize>, Vec<usize>, usize) = match task {
        Task::Detect => (
            (0..labels.len()).collect(),
            labels.iter().map(|&y| usize::from(y > 0)).collect(),
            2,
        ),
        Task::Classify => {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
            let t = idx.iter().map(|&i| usize::from(labels[i]) - 1).collect();
            (idx, t, class_count.saturating_sub(1))
        }
    };
    if classes < 2 {
        return Err(Error::config(format!(
            "task {task:?} needs at least two classes, dataset has {class_count}"
        )));
    }
    Ok((idx, targets, classes))
}

/// Row-major `n x classes` probabilities for each clip.
pub fn predict_probs(model: &IreneModel, features: &[WindowedFeatures]) -> Result<Vec<f64>> {
    let pooled = features
        .par_iter()
        .map(|f| model.pooled_embedding(f))
        .collect::<Result<Vec<_>>>()?;
    head_probs(model, &pooled)
}

fn head_probs(model: &IreneModel, pooled: &[Vec<f64>]) -> Result<Vec<f64>> {
    if pooled.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, |_| false);
    let x = tape.constant(stack(pooled)?);
    let logits = model.encoder.head_logits(&mut tape, &p, x)?;
    let probs = tape.softmax_rows(logits);
    Ok(tape.value(probs).data().to_vec())
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::matrix(rows.len(), rows[0].len(), rows.concat())
}

/// Task metrics of a finetuned model on a labeled dataset.
pub fn evaluate(
    model: &IreneModel,
    meta: &CheckpointMeta,
    dataset: &Dataset,
    task: Task,
) -> Result<EvalResult> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::data("evaluation needs every clip labeled"))?;
    let (idx, targets, classes) = task_labels(&labels, dataset.class_names.len(), task)?;
    if classes != model.shape.head_classes {
        return Err(Error::config(format!(
            "model head has {} outputs, task has {classes} classes",
            model.shape.head_classes
        )));
    }
    let mut features = featurize_dataset(&dataset.subset(&idx))?;
    meta.norm.apply_all(&mut features)?;
    let probs = predict_probs(model, &features)?;
    EvalResult::compute(&targets, &probs, classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub epoch: usize,
    pub seed: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Validation AUROC, or the negated training loss when undefined.
    pub val_score: f64,
    pub kept: bool,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: IreneModel,
    pub meta: CheckpointMeta,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub logs: Vec<FinetuneLog>,
}

impl FinetuneOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.model.to_checkpoint(&self.meta, &[])
    }
}

/// Builds the task model from a pretrained checkpoint: every pretrained
/// tensor is copied and a fresh head of the task's width is attached.
pub fn task_model(
    ck: &Checkpoint,
    classes: usize,
    seed: u64,
) -> Result<(IreneModel, CheckpointMeta)> {
    let (pre, meta, _) = IreneModel::from_checkpoint(ck)?;
    if meta.stage == Stage::Finetune && meta.shape.head_classes != classes {
        return Err(Error::config(format!(
            "checkpoint head has {} outputs, labels span {classes} classes",
            meta.shape.head_classes
        )));
    }
    let shape = ModelShape {
        head_classes: classes,
        ..meta.shape
    };
    let mut model = IreneModel::new(&meta.config.model, shape, seed)?;
    model.copy_body_from(&pre)?;
    Ok((model, meta))
}

/// Trains a classification head on the pretrained encoder. With `unfreeze`
/// the feature map and encoder blocks are trained as well.
pub fn finetune(
    ck: &Checkpoint,
    dataset: &Dataset,
    task: Task,
    train: &TrainConfig,
    unfreeze: bool,
    mut on_epoch: impl FnMut(&FinetuneLog),
) -> Result<FinetuneOutcome> {
    train.validate()?;
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::data("finetuning needs every clip labeled"))?;
    let (idx, targets, classes) = task_labels(&labels, dataset.class_names.len(), task)?;
    let (mut model, meta) = task_model(ck, classes, train.seed)?;
    if dataset.channels != model.shape.nodes {
        return Err(Error::data(format!(
            "dataset has {} channels, checkpoint expects {}",
            dataset.channels, model.shape.nodes
        )));
    }
    let mut features = featurize_dataset(&dataset.subset(&idx))?;
    meta.norm.apply_all(&mut features)?;

    let (tr_pos, val_pos) = split_indices(idx.len(), train.val_fraction, train.seed);
    let tr_targets: Vec<u8> = tr_pos.iter().map(|&i| targets[i] as u8).collect();
    let kept = balance_undersample(&tr_targets, train.seed)?;
    let tr_pos: Vec<usize> = kept.iter().map(|&k| tr_pos[k]).collect();

    let head = model.head_params();
    let trainable: Vec<ParamId> = if unfreeze {
        let mut v = model.encoder_params();
        v.extend(&head);
        v
    } else {
        head.clone()
    };
    let frozen_pooled = if unfreeze {
        None
    } else {
        Some(
            features
                .par_iter()
                .map(|f| model.pooled_embedding(f))
                .collect::<Result<Vec<_>>>()?,
        )
    };

    let mut adam = Adam::new(train.adam());
    let mut stop = EarlyStop::new(train.patience);
    let mut best = (model.store.clone(), 0usize, f64::NEG_INFINITY);
    let mut logs = Vec::new();
    for epoch in 0..train.finetune_max_epochs {
        let mut order = tr_pos.clone();
        order.shuffle(&mut substream_indexed(
            train.seed,
            "finetune-epoch",
            epoch as u64,
        ));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(train.train_batch) {
            let y: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let (value, hits) = match &frozen_pooled {
                Some(pooled) => {
                    let rows: Vec<Vec<f64>> = batch.iter().map(|&i| pooled[i].clone()).collect();
                    head_step(&mut model, &mut adam, &rows, &y)?
                }
                None => {
                    let mut tape = Tape::new();
                    let p = model.store.bind(&mut tape, |id| trainable.contains(&id));
                    let x = pooled_batch(&model, &mut tape, &p, &features, batch)?;
                    cross_entropy_step(&mut model, &mut adam, &mut tape, &p, x, &y)?
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: epoch,
                    last_finite: loss_sum,
                });
            }
            correct += hits;
            loss_sum += value * batch.len() as f64;
        }
        let n = tr_pos.len().max(1) as f64;
        let train_loss = loss_sum / n;
        let val_score = match validation_auroc(
            &model,
            &features,
            &targets,
            &val_pos,
            classes,
            frozen_pooled.as_deref(),
        )? {
            Some(a) => a,
            None => -train_loss,
        };
        let kept = stop.observe(val_score);
        if kept {
            best = (model.store.clone(), epoch, val_score);
        }
        let log = FinetuneLog {
            epoch,
            seed: train.seed,
            lr: train.lr,
            train_loss,
            train_accuracy: correct as f64 / n,
            val_score,
            kept,
        };
        log::info!("finetune epoch {epoch}: loss {train_loss:.5}, val {val_score:.4}");
        on_epoch(&log);
        logs.push(log);
        if stop.exhausted() {
            break;
        }
    }
    let (store, best_epoch, best_score) = best;
    model.store = store;
    let meta = CheckpointMeta {
        stage: Stage::Finetune,
        shape: model.shape,
        seed: train.seed,
        epoch: best_epoch,
        best_val_auroc: (!val_pos.is_empty() && best_score >= 0.0).then_some(best_score),
        task: Some(task),
        adjacency_clips: Vec::new(),
        ..meta
    };
    Ok(FinetuneOutcome {
        model,
        meta,
        train_indices: tr_pos.iter().map(|&i| idx[i]).collect(),
        val_indices: val_pos.iter().map(|&i| idx[i]).collect(),
        best_epoch,
        best_score,
        logs,
    })
}

/// One cross-entropy update of the head on fixed pooled rows; returns the
/// loss before the update and the number of correct predictions.
pub fn head_step(
    model: &mut IreneModel,
    adam: &mut Adam,
    pooled: &[Vec<f64>],
    targets: &[usize],
) -> Result<(f64, usize)> {
    let head = model.head_params();
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, |id| head.contains(&id));
    let x = tape.constant(stack(pooled)?);
    cross_entropy_step(model, adam, &mut tape, &p, x, targets)
}

fn cross_entropy_step(
    model: &mut IreneModel,
    adam: &mut Adam,
    tape: &mut Tape,
    p: &Bound,
    x: Var,
    targets: &[usize],
) -> Result<(f64, usize)> {
    let logits = model.encoder.head_logits(tape, p, x)?;
    let nce = infonce_predictive(tape, logits, targets)?;
    let loss = tape.scale(nce, -1.0);
    let value = tape.scalar_value(loss);
    let (_, c) = tape.value(logits).dims2();
    let correct = tape
        .value(logits)
        .data()
        .chunks(c)
        .zip(targets)
        .filter(|(row, &t)| crate::encoder::argmax(row) == t)
        .count();
    if value.is_finite() {
        tape.backward(loss)?;
        adam.step(&mut model.store, &p.grads(tape));
    }
    Ok((value, correct))
}

fn pooled_batch(
    model: &IreneModel,
    tape: &mut Tape,
    p: &Bound,
    features: &[WindowedFeatures],
    batch: &[usize],
) -> Result<Var> {
    let rows = batch
        .iter()
        .map(|&i| model.pooled_on_tape(tape, p, &features[i]))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

fn validation_auroc(
    model: &IreneModel,
    features: &[WindowedFeatures],
    targets: &[usize],
    val: &[usize],
    classes: usize,
    frozen: Option<&[Vec<f64>]>,
) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let pooled: Vec<Vec<f64>> = match frozen {
        Some(p) => val.iter().map(|&i| p[i].clone()).collect(),
        None => val
            .par_iter()
            .map(|&i| model.pooled_embedding(&features[i]))
            .collect::<Result<_>>()?,
    };
    let probs = head_probs(model, &pooled)?;
    let y: Vec<usize> = val.iter().map(|&i| targets[i]).collect();
    let score = if classes == 2 {
        let pos: Vec<bool> = y.iter().map(|&t| t == 1).collect();
        let s: Vec<f64> = probs.chunks(2).map(|r| r[1]).collect();
        auroc(&pos, &s)
    } else {
        auroc_macro(&y, &probs, classes)
    };
    match score {
        Ok(a) => Ok(Some(a)),
        Err(Error::Undefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;
    use crate::rng::substream;
    use crate::selfcheck::Toy;
    use rand::Rng;

    #[test]
    fn detection_merges_seizure_types() {
        let (idx, t, c) = task_labels(&[0, 2, 1, 0], 3, Task::Detect).unwrap();
        assert_eq!((idx, t, c), (vec![0, 1, 2, 3], vec![0, 1, 1, 0], 2));
    }

    #[test]
    fn classification_drops_background() {
        let (idx, t, c) = task_labels(&[0, 2, 1, 0, 2], 3, Task::Classify).unwrap();
        assert_eq!((idx, t, c), (vec![1, 2, 4], vec![1, 0, 1], 2));
    }

    #[test]
    fn inconsistent_labels_are_config_errors() {
        assert!(matches!(
            task_labels(&[0, 3], 3, Task::Detect),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            task_labels(&[0, 1], 2, Task::Classify),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn symmetric_features_start_at_ln2() {
        let mut model = Toy::new(1).unwrap().model;
        let mut adam = Adam::new(AdamConfig::default());
        let rows = vec![vec![0.3; 8], vec![0.3; 8]];
        let (loss, _) = head_step(&mut model, &mut adam, &rows, &[0, 1]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-6, "{loss}");
    }

    #[test]
    fn separable_rows_are_fit_within_200_steps() {
        let mut model = Toy::new(2).unwrap().model;
        let mut adam = Adam::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });
        let mut rng = substream(7, "separable");
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for i in 0..40 {
            let y = i % 2;
            let mut r: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            r[0] = if y == 1 { 1.0 } else { -1.0 } * rng.random_range(0.5..1.5);
            rows.push(r);
            targets.push(y);
        }
        let mut accuracy = 0.0;
        for _ in 0..200 {
            let (_, correct) = head_step(&mut model, &mut adam, &rows, &targets).unwrap();
            accuracy = correct as f64 / rows.len() as f64;
        }
        assert_eq!(accuracy, 1.0);
    }

    #[test]
    fn head_step_touches_only_head() {
        let mut model = Toy::new(3).unwrap().model;
        let before = model.store.clone();
        let mut adam = Adam::new(AdamConfig::default());
        head_step(
            &mut model,
            &mut adam,
            &[vec![1.0; 8], vec![-1.0; 8]],
            &[0, 1],
        )
        .unwrap();
        let head = model.head_params();
        assert!(head.iter().any(|&id| before.get(id) != model.store.get(id)));
        for id in model
            .encoder_params()
            .into_iter()
            .chain(model.critic_params())
        {
            assert_eq!(before.get(id), model.store.get(id));
        }
    }
}
