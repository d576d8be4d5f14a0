//! Graph export: per-window adjacency JSON, density tables and structure
//! scores against planted graphs.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    clip_temporal_graphs, clip_xcorr_graphs, distance_graph, BaselineConfig, ElectrodeLayout,
};
use crate::error::{Error, Result};
use crate::graph::{construct_inference_graph, edge_density, AdjacencyParams, GraphConfig};
use crate::signal::{Dataset, GraphSequence, NormStats, WindowedFeatures};
use crate::trainer::{featurize_dataset, CheckpointMeta, IreneModel};

/// Graph construction methods that can be exported and compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMethod {
    /// Graphs of a trained model: learned adjacency where the checkpoint
    /// stores it, ridge self-expression on its embeddings elsewhere.
    Ib,
    /// Ridge self-expression on normalized spectral features.
    Ridge,
    Distance,
    Xcorr,
    Temporal,
}

impl GraphMethod {
    pub const ALL: [GraphMethod; 5] = [
        GraphMethod::Ib,
        GraphMethod::Ridge,
        GraphMethod::Distance,
        GraphMethod::Xcorr,
        GraphMethod::Temporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GraphMethod::Ib => "ib",
            GraphMethod::Ridge => "ridge",
            GraphMethod::Distance => "distance",
            GraphMethod::Xcorr => "xcorr",
            GraphMethod::Temporal => "temporal",
        }
    }

    pub fn needs_model(self) -> bool {
        self == GraphMethod::Ib
    }
}

impl fmt::Display for GraphMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GraphMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown graph method {s:?} (expected ib, ridge, distance, xcorr or temporal)"
                ))
            })
    }
}

/// Dense row-major `N x N` weights of every window of one clip.
pub type ClipGraphs = Vec<Vec<f64>>;

/// A trained model together with the learned adjacency stored next to it.
pub struct TrainedGraphs<'a> {
    pub model: &'a IreneModel,
    pub meta: &'a CheckpointMeta,
    pub adjacency: &'a [(usize, AdjacencyParams)],
}

/// Builds the graphs of every clip of `dataset` with `method`.
pub fn dataset_graphs(
    method: GraphMethod,
    dataset: &Dataset,
    graph: &GraphConfig,
    baselines: &BaselineConfig,
    trained: Option<&TrainedGraphs>,
) -> Result<Vec<ClipGraphs>> {
    graph.validate(dataset.channels)?;
    match method {
        GraphMethod::Ib => {
            let t = trained.ok_or_else(|| Error::config("the ib method needs a trained model"))?;
            ib_graphs(dataset, t)
        }
        GraphMethod::Ridge => {
            let mut features = featurize_dataset(dataset)?;
            let norm = NormStats::fit(&features)?;
            norm.apply_all(&mut features)?;
            features.par_iter().map(|f| ridge_clip(f, graph)).collect()
        }
        GraphMethod::Distance => {
            let layout = ElectrodeLayout::for_channels(dataset.channels);
            let g = distance_graph(&layout, baselines.distance_threshold)?;
            let windows = dataset.windows()?;
            Ok(vec![vec![g; windows]; dataset.clips.len()])
        }
        GraphMethod::Xcorr => dataset
            .clips
            .par_iter()
            .map(|c| clip_xcorr_graphs(c, dataset.window_seconds, baselines))
            .collect(),
        GraphMethod::Temporal => {
            let features = featurize_dataset(dataset)?;
            features
                .par_iter()
                .map(|f| clip_temporal_graphs(f, baselines))
                .collect()
        }
    }
}

fn ridge_clip(f: &WindowedFeatures, graph: &GraphConfig) -> Result<ClipGraphs> {
    (0..f.windows)
        .map(|t| {
            Ok(
                construct_inference_graph(&f.window_tensor(t), graph.ridge_alpha, graph.top_k)?
                    .weights,
            )
        })
        .collect()
}

fn ib_graphs(dataset: &Dataset, t: &TrainedGraphs) -> Result<Vec<ClipGraphs>> {
    if dataset.channels != t.model.shape.nodes {
        return Err(Error::data(format!(
            "dataset has {} channels, model expects {}",
            dataset.channels, t.model.shape.nodes
        )));
    }
    let mut features = featurize_dataset(dataset)?;
    t.meta.norm.apply_all(&mut features)?;
    features
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let learned = t
                .adjacency
                .iter()
                .find(|(k, a)| *k == i && a.windows == f.windows && a.nodes == f.nodes);
            let graphs = match learned {
                Some((_, a)) => t.model.learned_graphs(a)?,
                None => t.model.inference_graphs(f)?,
            };
            Ok(graphs.into_iter().map(|g| g.weights).collect())
        })
        .collect()
}

/// One window of the adjacency export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowAdjacency {
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Nonzero off-diagonal entries as `[i, j, weight]`, row-major.
    pub entries: Vec<(usize, usize, f64)>,
}

/// Export records for one clip. Weights must lie in `[0, 1]`.
pub fn adjacency_records(graphs: &[Vec<f64>], n: usize) -> Result<Vec<WindowAdjacency>> {
    graphs
        .iter()
        .enumerate()
        .map(|(t, w)| {
            if w.len() != n * n {
                return Err(Error::contract(format!(
                    "window {t} holds {} weights, expected {}",
                    w.len(),
                    n * n
                )));
            }
            let mut entries = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    let v = w[i * n + j];
                    if i == j || v == 0.0 {
                        continue;
                    }
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::contract(format!(
                            "weight {v} at ({i}, {j}) outside [0, 1]"
                        )));
                    }
                    entries.push((i, j, v));
                }
            }
            Ok(WindowAdjacency { t, n, entries })
        })
        .collect()
}

pub fn adjacency_json(graphs: &[Vec<f64>], n: usize) -> Result<String> {
    Ok(serde_json::to_string(&adjacency_records(graphs, n)?)?)
}

/// `clip,t,density` rows for every window.
pub fn density_csv(graphs: &[ClipGraphs], n: usize) -> String {
    let mut s = String::from("clip,t,density\n");
    for (c, clip) in graphs.iter().enumerate() {
        for (t, w) in clip.iter().enumerate() {
            s.push_str(&format!("{c},{t},{}\n", edge_density(w, n)));
        }
    }
    s
}

pub fn mean_density(graphs: &[ClipGraphs], n: usize) -> f64 {
    let (sum, count) = graphs
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, k), w| (s + edge_density(w, n), k + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Off-diagonal edge precision and recall pooled over every window.
/// Precision is 0 when no edge is predicted; recall is 0 when nothing is
/// planted.
pub fn structure_scores(graphs: &[ClipGraphs], planted: &[GraphSequence]) -> Result<(f64, f64)> {
    if graphs.len() != planted.len() {
        return Err(Error::contract("graph and planted clip counts differ"));
    }
    let (mut hit, mut predicted, mut truth) = (0usize, 0usize, 0usize);
    for (clip, gs) in graphs.iter().zip(planted) {
        if clip.len() != gs.windows {
            return Err(Error::contract("graph and planted window counts differ"));
        }
        let n = gs.nodes;
        for (t, w) in clip.iter().enumerate() {
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    let p = w[i * n + j] != 0.0;
                    let g = gs.get(t, i, j);
                    hit += usize::from(p && g);
                    predicted += usize::from(p);
                    truth += usize::from(g);
                }
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((ratio(hit, predicted), ratio(hit, truth)))
}

/// One row of the method comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: GraphMethod,
    pub mean_density: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut s = String::from("method,mean_density,precision,recall\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.method,
            r.mean_density,
            opt(r.precision),
            opt(r.recall)
        ));
    }
    s
}
