//! Two-stage optimization: self-supervised pretraining of graphs, encoder and
//! decoder, then a classification head on top of the frozen encoder.

mod finetune;
mod model;
mod pretrain;
mod probe;

use serde::{Deserialize, Serialize};

pub use finetune::{
    evaluate, finetune, head_step, predict_probs, task_labels, task_model, FinetuneLog,
    FinetuneOutcome,
};
pub use model::{featurize_dataset, CheckpointMeta, IreneModel, Loaded, ModelShape, Stage};
pub use pretrain::{
    pretrain, pretrain_loss, split_indices, validation_loss, ClipInput, EpochLog, LossVars,
    LossWeights, PretrainOutcome, Pretrainer, StepLosses,
};
pub use probe::ridge_probe_scores;

use crate::baselines::BaselineConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub graph: GraphConfig,
    pub encoder: EncoderConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Step size for the free per-window adjacency matrices.
    pub adjacency_lr: f64,
    pub train_batch: usize,
    pub eval_batch: usize,
    /// Temporal smoothness weight.
    pub lambda3: f64,
    /// Masked reconstruction weight.
    pub lambda4: f64,
    pub max_epochs: usize,
    pub finetune_max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Ridge penalty of the linear probe used for early stopping.
    pub probe_ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 1e-5,
            adjacency_lr: 1e-2,
            train_batch: 32,
            eval_batch: 64,
            lambda3: 10.0,
            lambda4: 1.0,
            max_epochs: 100,
            finetune_max_epochs: 200,
            patience: 10,
            seed: 0,
            val_fraction: 0.2,
            probe_ridge: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.adjacency_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.train_batch == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.weight_decay < 0.0 || self.lambda3 < 0.0 || self.lambda4 < 0.0 {
            return Err(Error::config(
                "weight decay and loss weights must be non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        if !(self.probe_ridge > 0.0) {
            return Err(Error::config("probe_ridge must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn adjacency_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.adjacency_lr,
            ..self.adam()
        }
    }
}

/// Everything a run needs besides data; the JSON config file format.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
}

impl PipelineConfig {
    pub fn validate(&self, nodes: usize) -> Result<()> {
        self.model.graph.validate(nodes)?;
        self.model.encoder.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Early-stopping bookkeeping: the best score so far and the patience
/// counter. An equal score replaces the snapshot but does not reset patience.
#[derive(Clone, Debug)]
pub(crate) struct EarlyStop {
    pub best: f64,
    pub since_improvement: usize,
    pub patience: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            best: f64::NEG_INFINITY,
            since_improvement: 0,
            patience,
        }
    }

    /// Returns whether the new score should become the kept snapshot.
    pub fn observe(&mut self, score: f64) -> bool {
        if score > self.best {
            self.best = score;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement += 1;
            score == self.best
        }
    }

    pub fn exhausted(&self) -> bool {
        self.since_improvement >= self.patience
    }
}
