use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ModelConfig, PipelineConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{Checkpoint, Encoder, NamedArray, WindowGraph};
use crate::error::{Error, Result};
use crate::graph::{
    construct_inference_graph, embed_nodes, AdjacencyParams, FeatureEncoder, FinalAdjacency,
    IbHeads,
};
use crate::metrics::Task;
use crate::nn::{Bound, ParamId, ParamStore};
use crate::rng::substream;
use crate::signal::{featurize_all, Dataset, NormStats, Taper, WindowedFeatures};

const ADJACENCY_PREFIX: &str = "adjacency/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub nodes: usize,
    pub input_dim: usize,
    /// Label alphabet seen by the predictive scorer.
    pub ib_classes: usize,
    pub head_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// JSON trailer of every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config: PipelineConfig,
    pub shape: ModelShape,
    pub norm: NormStats,
    pub class_names: Vec<String>,
    pub window_seconds: f64,
    pub clip_seconds: u32,
    pub seed: u64,
    pub epoch: usize,
    pub best_val_auroc: Option<f64>,
    pub task: Option<Task>,
    /// Dataset indices of the clips whose learned adjacency is stored.
    pub adjacency_clips: Vec<usize>,
}

/// A model with its metadata and the learned adjacency stored next to it,
/// keyed by dataset clip index.
pub type Loaded = (IreneModel, CheckpointMeta, Vec<(usize, AdjacencyParams)>);

/// Every trainable piece of the method in one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct IreneModel {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub store: ParamStore,
    pub f_theta: FeatureEncoder,
    pub heads: IbHeads,
    pub encoder: Encoder,
}

impl IreneModel {
    pub fn new(config: &ModelConfig, shape: ModelShape, seed: u64) -> Result<Self> {
        config.graph.validate(shape.nodes)?;
        config.encoder.validate()?;
        let mut rng = substream(seed, "init");
        let mut store = ParamStore::new();
        let f_theta =
            FeatureEncoder::new(&mut store, shape.input_dim, config.encoder.hidden, &mut rng);
        let heads = IbHeads::new(
            &mut store,
            shape.nodes,
            shape.ib_classes,
            &config.graph,
            &mut rng,
        );
        let encoder = Encoder::new(
            &mut store,
            &config.encoder,
            shape.input_dim,
            shape.head_classes,
            &mut rng,
        )?;
        Ok(IreneModel {
            config: config.clone(),
            shape,
            store,
            f_theta,
            heads,
            encoder,
        })
    }

    pub fn critic_params(&self) -> Vec<ParamId> {
        self.heads.critic.params()
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.encoder.head_params()
    }

    /// `f_theta` plus encoder blocks and mask token.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut v = self.f_theta.params().to_vec();
        v.extend(self.encoder.body_params());
        v
    }

    fn check_features(&self, f: &WindowedFeatures) -> Result<()> {
        if f.nodes != self.shape.nodes || f.dim != self.shape.input_dim {
            return Err(Error::data(format!(
                "features are {} nodes x {} bins, model expects {} x {}",
                f.nodes, f.dim, self.shape.nodes, self.shape.input_dim
            )));
        }
        Ok(())
    }

    /// Feature windows as constants and their embeddings.
    pub fn embed(
        &self,
        tape: &mut Tape,
        p: &Bound,
        f: &WindowedFeatures,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        self.check_features(f)?;
        let x: Vec<Var> = (0..f.windows)
            .map(|t| tape.constant(f.window_tensor(t)))
            .collect();
        let z = embed_nodes(tape, p, &self.f_theta, &x)?;
        Ok((x, z))
    }

    /// Embedding values of every window, without gradients.
    pub fn embedding_values(&self, f: &WindowedFeatures) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, |_| false);
        let (_, z) = self.embed(&mut tape, &p, f)?;
        Ok(z.iter().map(|v| tape.value(*v).clone()).collect())
    }

    /// Label-free graphs: ridge self-expression on the embeddings, finalized.
    pub fn inference_graphs(&self, f: &WindowedFeatures) -> Result<Vec<FinalAdjacency>> {
        let g = &self.config.graph;
        self.embedding_values(f)?
            .iter()
            .map(|z| {
                let a = construct_inference_graph(z, g.ridge_alpha, g.top_k)?;
                Ok(if g.binarize { a.binarized() } else { a })
            })
            .collect()
    }

    /// Finalized learned graphs of a training clip.
    pub fn learned_graphs(&self, a: &AdjacencyParams) -> Result<Vec<FinalAdjacency>> {
        let g = &self.config.graph;
        (0..a.windows)
            .map(|t| {
                let f = crate::graph::finalize_graph(a.window(t), a.nodes, g.top_k)?;
                Ok(if g.binarize { f.binarized() } else { f })
            })
            .collect()
    }

    /// Records constant graphs for the encoder.
    pub fn graph_vars(tape: &mut Tape, graphs: &[FinalAdjacency]) -> Vec<WindowGraph> {
        graphs
            .iter()
            .map(|g| {
                let a = tape.constant(g.to_tensor());
                WindowGraph {
                    adjacency: a,
                    phi: a,
                }
            })
            .collect()
    }

    /// Encoder output pooled over nodes and windows (`1 x d`) with
    /// inference graphs computed from the current parameters.
    pub fn pooled_on_tape(&self, tape: &mut Tape, p: &Bound, f: &WindowedFeatures) -> Result<Var> {
        let graphs = self.inference_graphs(f)?;
        let (_, z) = self.embed(tape, p, f)?;
        let gv = Self::graph_vars(tape, &graphs);
        let h = self.encoder.encode(tape, p, &z, &gv)?;
        self.encoder.pool(tape, &h)
    }

    pub fn pooled_embedding(&self, f: &WindowedFeatures) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, |_| false);
        let v = self.pooled_on_tape(&mut tape, &p, f)?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn to_checkpoint(
        &self,
        meta: &CheckpointMeta,
        adjacency: &[(usize, AdjacencyParams)],
    ) -> Result<Checkpoint> {
        let mut meta = meta.clone();
        meta.adjacency_clips = adjacency.iter().map(|(i, _)| *i).collect();
        let mut ck = Checkpoint::from_store(&self.store, serde_json::to_value(&meta)?);
        for (i, a) in adjacency {
            ck.arrays.push(NamedArray {
                name: format!("{ADJACENCY_PREFIX}{i}"),
                dims: vec![a.windows, a.nodes, a.nodes],
                values: a.values.iter().map(|&v| v as f32).collect(),
            });
        }
        Ok(ck)
    }

    /// Rebuilds the model described by the trailer and loads its arrays.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Loaded> {
        let meta = parse_meta(&ck.trailer)?;
        let mut model = IreneModel::new(&meta.config.model, meta.shape, meta.seed)?;
        let (adj, params): (Vec<&NamedArray>, Vec<&NamedArray>) = ck
            .arrays
            .iter()
            .partition(|a| a.name.starts_with(ADJACENCY_PREFIX));
        let body = Checkpoint {
            arrays: params.into_iter().cloned().collect(),
            trailer: Value::Null,
        };
        body.load_into(&mut model.store)?;
        let mut adjacency = Vec::with_capacity(adj.len());
        for a in adj {
            let idx: usize = a.name[ADJACENCY_PREFIX.len()..]
                .parse()
                .map_err(|_| Error::data(format!("bad adjacency array name {}", a.name)))?;
            if a.dims.len() != 3 || a.dims[1] != meta.shape.nodes || a.dims[2] != meta.shape.nodes {
                return Err(Error::data(format!(
                    "adjacency array {} has dims {:?}",
                    a.name, a.dims
                )));
            }
            let mats: Vec<Vec<f64>> = a
                .values
                .chunks(a.dims[1] * a.dims[2])
                .map(|c| c.iter().map(|&v| f64::from(v)).collect())
                .collect();
            adjacency.push((idx, AdjacencyParams::from_windows(meta.shape.nodes, &mats)?));
        }
        Ok((model, meta, adjacency))
    }

    /// Copies every parameter except the classification head from `other`.
    pub fn copy_body_from(&mut self, other: &IreneModel) -> Result<()> {
        let head: Vec<String> = self
            .head_params()
            .iter()
            .map(|&id| self.store.name(id).to_string())
            .collect();
        for (_, name, t) in other.store.iter() {
            if head.iter().any(|h| h == name) {
                continue;
            }
            self.store.assign(name, t.shape(), t.data().to_vec())?;
        }
        Ok(())
    }
}

/// Spectral features of every clip, unnormalized.
pub fn featurize_dataset(dataset: &Dataset) -> Result<Vec<WindowedFeatures>> {
    featurize_all(&dataset.clips, dataset.window_seconds, Taper::default())
}

fn parse_meta(v: &Value) -> Result<CheckpointMeta> {
    serde_json::from_value(v.clone()).map_err(|e| Error::data(format!("checkpoint trailer: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ModelShape {
        ModelShape {
            nodes: 5,
            input_dim: 9,
            ib_classes: 2,
            head_classes: 2,
        }
    }

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.encoder.hidden = 8;
        c.graph.top_k = 2;
        c
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = IreneModel::new(&small_config(), shape(), 3).unwrap();
        let b = IreneModel::new(&small_config(), shape(), 3).unwrap();
        let c = IreneModel::new(&small_config(), shape(), 4).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn checkpoint_round_trip_restores_model_and_graphs() {
        let model = IreneModel::new(&small_config(), shape(), 1).unwrap();
        let meta = CheckpointMeta {
            stage: Stage::Pretrain,
            config: PipelineConfig {
                model: small_config(),
                ..PipelineConfig::default()
            },
            shape: shape(),
            norm: NormStats {
                mean: vec![0.0; 9],
                std: vec![1.0; 9],
            },
            class_names: vec!["a".into(), "b".into()],
            window_seconds: 1.0,
            clip_seconds: 4,
            seed: 1,
            epoch: 2,
            best_val_auroc: Some(0.5),
            task: None,
            adjacency_clips: vec![],
        };
        let mut rng = substream(0, "adj");
        let adj = vec![(7, AdjacencyParams::random(4, 5, 0.5, &mut rng))];
        let ck = model.to_checkpoint(&meta, &adj).unwrap();
        let (back, meta2, adj2) = IreneModel::from_checkpoint(&ck).unwrap();
        assert_eq!(meta2.adjacency_clips, vec![7]);
        assert_eq!(meta2.epoch, 2);
        for ((_, _, a), (_, _, b)) in model.store.iter().zip(back.store.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
        assert_eq!(adj2[0].0, 7);
        assert!(adj2[0].1.diagonal_is_zero());
        let bytes = ck.to_bytes().unwrap();
        let reread = Checkpoint::from_bytes(&bytes, std::path::Path::new("m")).unwrap();
        assert_eq!(reread, ck);
    }

    #[test]
    fn wrong_feature_shape_is_a_data_error() {
        let model = IreneModel::new(&small_config(), shape(), 1).unwrap();
        let f = WindowedFeatures::new(2, 5, 4, 1.0, vec![0.0; 40]).unwrap();
        assert!(matches!(model.inference_graphs(&f), Err(Error::Data(_))));
    }
}
