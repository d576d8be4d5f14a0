//! Structure-aware graph transformer with masked-node reconstruction and a
//! pooled classification head.

mod checkpoint;
mod layers;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{attention_weights, gcn_layer, gcn_normalize, gsa_attention, AttentionHead};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{glorot, Bound, Linear, Mlp, ParamId, ParamStore};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    #[default]
    LearnedToken,
    ZeroVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub gamma_init: f64,
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            blocks: 2,
            hidden: 32,
            heads: 1,
            gamma_init: 1.0,
            mask_ratio: 0.15,
            mask_mode: MaskMode::LearnedToken,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(Error::config("blocks, hidden and heads must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!(
                "mask ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    /// Number of nodes hidden per window.
    pub fn mask_count(&self, nodes: usize) -> usize {
        (self.mask_ratio * nodes as f64).round() as usize
    }
}

/// Masked node indices (sorted) for each window.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub windows: Vec<Vec<usize>>,
}

impl MaskSpec {
    /// Independent draw of `count` nodes per window.
    pub fn draw(windows: usize, nodes: usize, count: usize, rng: &mut StreamRng) -> Self {
        MaskSpec {
            windows: (0..windows)
                .map(|_| {
                    let mut v = index::sample(rng, nodes, count.min(nodes)).into_vec();
                    v.sort_unstable();
                    v
                })
                .collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.windows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub gcn1: Linear,
    pub gcn2: Linear,
    pub heads: Vec<AttentionHead>,
    pub gamma: ParamId,
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
}

/// Parameter handles of the encoder, decoder and classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub blocks: Vec<Block>,
    pub mask_token: ParamId,
    pub decoder: Mlp,
    pub head: Mlp,
    pub input_dim: usize,
    pub classes: usize,
}

/// One window's graph as seen by the encoder.
#[derive(Clone, Copy, Debug)]
pub struct WindowGraph {
    pub adjacency: Var,
    pub phi: Var,
}

impl Encoder {
    /// Registers all parameters in `store`. The last head layer starts at
    /// zero so initial logits are uniform.
    pub fn new(
        store: &mut ParamStore,
        config: &EncoderConfig,
        input_dim: usize,
        classes: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let dh = d / config.heads;
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let gcn1 = Linear::new(store, &format!("block{l}.gcn1"), d, d, rng);
            let gcn2 = Linear::new(store, &format!("block{l}.gcn2"), d, d, rng);
            let heads = (0..config.heads)
                .map(|h| AttentionHead {
                    wq: store.add(&format!("block{l}.attn{h}.wq"), glorot(d, dh, rng)),
                    wk: store.add(&format!("block{l}.attn{h}.wk"), glorot(d, dh, rng)),
                    wv: store.add(&format!("block{l}.attn{h}.wv"), glorot(d, dh, rng)),
                    dim: dh,
                })
                .collect();
            let gamma = store.add(
                &format!("block{l}.gamma"),
                Tensor::scalar(config.gamma_init),
            );
            let ln = |store: &mut ParamStore, k: usize| {
                (
                    store.add(&format!("block{l}.ln{k}.gain"), Tensor::full(&[d], 1.0)),
                    store.add(&format!("block{l}.ln{k}.bias"), Tensor::zeros(&[d])),
                )
            };
            let ln1 = ln(store, 1);
            let ln2 = ln(store, 2);
            blocks.push(Block {
                gcn1,
                gcn2,
                heads,
                gamma,
                ln1,
                ln2,
            });
        }
        let mask_token = store.add("mask_token", glorot(1, d, rng));
        let decoder = Mlp {
            hidden: Linear::new(store, "decoder.hidden", d, d, rng),
            output: Linear::new(store, "decoder.output", d, input_dim, rng),
        };
        let head = Mlp {
            hidden: Linear::new(store, "head.hidden", d, d, rng),
            output: Linear::zeroed(store, "head.output", d, classes),
        };
        Ok(Encoder {
            config: config.clone(),
            blocks,
            mask_token,
            decoder,
            head,
            input_dim,
            classes,
        })
    }

    /// Parameters of the blocks and mask token: what "the encoder" means
    /// when it is frozen.
    pub fn body_params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend(b.gcn1.params());
            v.extend(b.gcn2.params());
            for h in &b.heads {
                v.extend([h.wq, h.wk, h.wv]);
            }
            v.extend([b.gamma, b.ln1.0, b.ln1.1, b.ln2.0, b.ln2.1]);
        }
        v.push(self.mask_token);
        v
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.decoder.params().to_vec()
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.head.params().to_vec()
    }

    /// Replaces the masked rows of each window by the mask token (or zeros).
    pub fn apply_mask(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: &[Var],
        mask: &MaskSpec,
    ) -> Result<Vec<Var>> {
        if mask.windows.len() != z.len() {
            return Err(Error::contract(format!(
                "mask covers {} windows, input has {}",
                mask.windows.len(),
                z.len()
            )));
        }
        let mut out = Vec::with_capacity(z.len());
        for (&zt, rows) in z.iter().zip(&mask.windows) {
            if rows.is_empty() {
                out.push(zt);
                continue;
            }
            let (n, d) = tape.value(zt).dims2();
            let mut keep = vec![1.0; n * d];
            let mut ind = vec![0.0; n];
            for &r in rows {
                keep[r * d..(r + 1) * d].fill(0.0);
                ind[r] = 1.0;
            }
            let keep = tape.constant(Tensor::matrix(n, d, keep)?);
            let kept = tape.mul(zt, keep)?;
            match self.config.mask_mode {
                MaskMode::ZeroVector => out.push(kept),
                MaskMode::LearnedToken => {
                    let ind = tape.constant(Tensor::matrix(n, 1, ind)?);
                    let fill = tape.matmul(ind, p[self.mask_token])?;
                    out.push(tape.add(kept, fill)?);
                }
            }
        }
        Ok(out)
    }

    /// `H <- LN(H + GCN2(GCN1(H))); H <- LN(H + GSA(H, phi))`.
    pub fn block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        l: usize,
        h: Var,
        g: &WindowGraph,
    ) -> Result<Var> {
        let b = &self.blocks[l];
        let eps = self.config.layer_norm_eps;
        let norm = gcn_normalize(tape, g.adjacency)?;
        let x = gcn_layer(tape, p, &b.gcn1, norm, h)?;
        let x = gcn_layer(tape, p, &b.gcn2, norm, x)?;
        let r = tape.add(h, x)?;
        let h = tape.layer_norm(r, p[b.ln1.0], p[b.ln1.1], eps)?;
        let a = gsa_attention(tape, p, &b.heads, p[b.gamma], h, g.phi)?;
        let r = tape.add(h, a)?;
        tape.layer_norm(r, p[b.ln2.0], p[b.ln2.1], eps)
    }

    /// Runs every block on each window with that window's graph.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: &[Var],
        graphs: &[WindowGraph],
    ) -> Result<Vec<Var>> {
        if z.len() != graphs.len() {
            return Err(Error::contract(format!(
                "{} windows but {} graphs",
                z.len(),
                graphs.len()
            )));
        }
        z.iter()
            .zip(graphs)
            .map(|(&zt, g)| {
                let mut h = zt;
                for l in 0..self.blocks.len() {
                    h = self.block(tape, p, l, h, g)?;
                }
                Ok(h)
            })
            .collect()
    }

    /// Decoder output for every masked node, stacked window by window.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, h: &[Var], mask: &MaskSpec) -> Result<Var> {
        let picked = gather_masked(tape, h, mask)?;
        self.decoder.forward(tape, p, picked)
    }

    /// Mean over nodes and windows: `1 x d`.
    pub fn pool(&self, tape: &mut Tape, h: &[Var]) -> Result<Var> {
        if h.is_empty() {
            return Err(Error::contract("cannot pool zero windows"));
        }
        let n = tape.value(h[0]).dims2().0;
        let mut total = tape.sum_cols(h[0]);
        for &ht in &h[1..] {
            let s = tape.sum_cols(ht);
            total = tape.add(total, s)?;
        }
        Ok(tape.scale(total, 1.0 / (n * h.len()) as f64))
    }

    /// Head logits for `B x d` pooled rows.
    pub fn head_logits(&self, tape: &mut Tape, p: &Bound, pooled: Var) -> Result<Var> {
        self.head.forward(tape, p, pooled)
    }

    pub fn classify(&self, tape: &mut Tape, p: &Bound, h: &[Var]) -> Result<Var> {
        let pooled = self.pool(tape, h)?;
        self.head_logits(tape, p, pooled)
    }
}

fn gather_masked(tape: &mut Tape, rows: &[Var], mask: &MaskSpec) -> Result<Var> {
    if mask.is_empty() {
        return Err(Error::contract(
            "reconstruction needs at least one masked node",
        ));
    }
    if mask.windows.len() != rows.len() {
        return Err(Error::contract("mask and window counts differ"));
    }
    let parts = rows
        .iter()
        .zip(&mask.windows)
        .filter(|(_, m)| !m.is_empty())
        .map(|(&v, m)| tape.gather_rows(v, m))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&parts)
}

/// `(1/|M|) sum_{i in M} ||xhat_i - x_i||^2`, with `x` the original
/// per-window features and `xhat` the stacked decoder output.
pub fn recon_loss(tape: &mut Tape, xhat: Var, x: &[Var], mask: &MaskSpec) -> Result<Var> {
    let target = gather_masked(tape, x, mask)?;
    let diff = tape.sub(xhat, target)?;
    let sq = tape.frobenius_sq(diff);
    Ok(tape.scale(sq, 1.0 / mask.total() as f64))
}

/// Index of the largest logit; ties go to the lowest class.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
