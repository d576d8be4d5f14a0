//! Learned self-expressive adjacency, the two mutual-information estimators,
//! temporal smoothness and graph finalization.

mod adjacency;
mod finalize;
mod ib;
mod ridge;

use serde::{Deserialize, Serialize};

pub use adjacency::AdjacencyParams;
pub use finalize::{edge_density, finalize_graph, finalize_on_tape, FinalAdjacency};
pub use ib::{
    dv_redundancy, embed_nodes, ib_graph_loss, infonce_predictive, mi_terms, pool_adjacency,
    pool_embeddings, sattolo, self_expressive_loss, smoothness_loss, Critic, FeatureEncoder,
    IbHeads, IbTerms, IbWindows, Scorer,
};
pub use ridge::{construct_inference_graph, ridge_coefficients};

/// Graph-construction hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub top_k: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub ridge_alpha: f64,
    /// Width of the linear projection of a flattened adjacency.
    pub pooled_dim: usize,
    pub critic_hidden: usize,
    /// Replace finalized weights by their 0/1 support.
    pub binarize: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            top_k: 3,
            lambda1: 0.1,
            lambda2: 1.0,
            ridge_alpha: 0.1,
            pooled_dim: 16,
            critic_hidden: 32,
            binarize: false,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self, nodes: usize) -> crate::Result<()> {
        if nodes < 2 || self.top_k < 1 || self.top_k > nodes - 1 {
            return Err(crate::Error::config(format!(
                "top_k {} outside [1, {}]",
                self.top_k,
                nodes.saturating_sub(1)
            )));
        }
        if !(self.ridge_alpha > 0.0) {
            return Err(crate::Error::config("ridge_alpha must be positive"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(crate::Error::config("loss weights must be non-negative"));
        }
        if self.pooled_dim == 0 || self.critic_hidden == 0 {
            return Err(crate::Error::config(
                "pooled_dim and critic_hidden must be positive",
            ));
        }
        Ok(())
    }
}
