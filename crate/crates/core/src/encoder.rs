//! Node features and the tabular graph transformer.
//!
//! Each layer computes, for every node `i` with in-neighbourhood `N(i)`
//! (stored in-edges plus a self-loop):
//!
//! ```text
//! a_ij  = LeakyReLU(w_h . [K_h v_i || K_h v_j])
//! alpha = softmax of a_i. over j in N(i)
//! u_i   = LeakyReLU(R v_i + concat_h sum_j alpha_ij M_h v_j)
//! v'_i  = LayerNorm(FFNN(u_i))
//! ```
//!
//! with per-head key maps `K_h`, message maps `M_h` (both `d -> d/H`),
//! attention vectors `w_h` and a residual map `R` (`d -> d`).

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::embedding::{tokenize, EmbeddingTable, TextEncoder};
use crate::graph::TabularGraph;
use crate::numerics::init::xavier_uniform;
use crate::numerics::{Matrix, ParameterStore, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphTransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Width of an optional hidden layer inside the feed-forward block.
    /// `None` makes the block a single affine map.
    pub ffn_hidden: Option<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub layer_norm_eps: f64,
}

impl Default for GraphTransformerConfig {
    fn default() -> Self {
        GraphTransformerConfig {
            layers: 4,
            heads: 4,
            hidden: 300,
            ffn_hidden: None,
            dropout: 0.1,
            leaky_slope: 0.2,
            layer_norm_eps: 1e-5,
        }
    }
}

impl GraphTransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 {
            return Err("graph transformer needs at least one layer".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(format!(
                "head count {} must divide hidden size {}",
                self.heads, self.hidden
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(format!("leaky slope {} outside (0, 1)", self.leaky_slope));
        }
        Ok(())
    }
}

pub(crate) struct LayerNames {
    pub residual: String,
    pub key: Vec<String>,
    pub message: Vec<String>,
    pub attention: Vec<String>,
    pub ffn: Vec<(String, String)>,
    pub norm_gain: String,
    pub norm_bias: String,
}

pub(crate) fn layer_names(config: &GraphTransformerConfig, layer: usize) -> LayerNames {
    let p = format!("gt.{layer}");
    let heads = 0..config.heads;
    LayerNames {
        residual: format!("{p}.residual"),
        key: heads.clone().map(|h| format!("{p}.head{h}.key")).collect(),
        message: heads.clone().map(|h| format!("{p}.head{h}.message")).collect(),
        attention: heads.map(|h| format!("{p}.head{h}.attention")).collect(),
        ffn: match config.ffn_hidden {
            None => vec![(format!("{p}.ffn.weight"), format!("{p}.ffn.bias"))],
            Some(_) => vec![
                (format!("{p}.ffn.weight1"), format!("{p}.ffn.bias1")),
                (format!("{p}.ffn.weight2"), format!("{p}.ffn.bias2")),
            ],
        },
        norm_gain: format!("{p}.norm.gain"),
        norm_bias: format!("{p}.norm.bias"),
    }
}

/// Adds Xavier-initialized weights, zero biases and unit LayerNorm gains for
/// every layer.
pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    config: &GraphTransformerConfig,
    rng: &mut R,
) -> Result<(), TensorError> {
    let d = config.hidden;
    let dh = config.head_dim();
    for l in 0..config.layers {
        let names = layer_names(config, l);
        store.insert(&names.residual, xavier_uniform((d, d), rng))?;
        for h in 0..config.heads {
            store.insert(&names.key[h], xavier_uniform((d, dh), rng))?;
            store.insert(&names.message[h], xavier_uniform((d, dh), rng))?;
            store.insert(&names.attention[h], xavier_uniform((2 * dh, 1), rng))?;
        }
        let widths: Vec<(usize, usize)> = match config.ffn_hidden {
            None => vec![(d, d)],
            Some(w) => vec![(d, w), (w, d)],
        };
        for ((wn, bn), shape) in names.ffn.iter().zip(widths) {
            store.insert(wn, xavier_uniform(shape, rng))?;
            store.insert(bn, Array2::zeros((1, shape.1)))?;
        }
        store.insert(&names.norm_gain, Array2::ones((1, d)))?;
        store.insert(&names.norm_bias, Array2::zeros((1, d)))?;
    }
    Ok(())
}

/// Directed message-passing edges of a graph with one self-loop per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionIndex {
    pub n_nodes: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
}

impl AttentionIndex {
    pub fn new(n_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let (mut src, mut dst): (Vec<usize>, Vec<usize>) = edges.iter().copied().unzip();
        src.extend(0..n_nodes);
        dst.extend(0..n_nodes);
        AttentionIndex {
            n_nodes,
            src: src.into(),
            dst: dst.into(),
        }
    }

    pub fn from_graph(graph: &TabularGraph) -> Self {
        Self::new(graph.node_count(), &graph.edges)
    }

    pub fn edge_count(&self) -> usize {
        self.src.len()
    }
}

/// Initial node features: cell nodes embed their text; row and column
/// nodes average the features of their constituent cells.
pub fn init_node_features(graph: &TabularGraph, encoder: &dyn TextEncoder) -> Matrix {
    let d = encoder.dim();
    let mut features = Array2::zeros((graph.node_count(), d));
    for (i, node) in graph.nodes.iter().enumerate() {
        if graph.is_cell(i) {
            let v = encoder.encode(&node.text);
            features.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
    }
    for (i, members) in graph.constituents().iter().enumerate() {
        if graph.is_cell(i) || members.is_empty() {
            continue;
        }
        let mut acc = ndarray::Array1::<f64>::zeros(d);
        for &m in members {
            acc += &features.row(m);
        }
        acc /= members.len() as f64;
        features.row_mut(i).assign(&acc);
    }
    features
}

/// Attention weights of one head, aligned with the edges of `index`.
/// Weights of the edges entering each node sum to one.
pub fn attention_scores(
    tape: &mut Tape,
    store: &ParameterStore,
    config: &GraphTransformerConfig,
    layer: usize,
    head: usize,
    index: &AttentionIndex,
    states: Var,
) -> Result<Var, TensorError> {
    let names = layer_names(config, layer);
    let key = tape.param(store, &names.key[head])?;
    let attention = tape.param(store, &names.attention[head])?;
    let keys = tape.matmul(states, key)?;
    let target = tape.gather_rows(keys, index.dst.clone())?;
    let source = tape.gather_rows(keys, index.src.clone())?;
    let pair = tape.concat_cols(&[target, source])?;
    let raw = tape.matmul(pair, attention)?;
    let raw = tape.leaky_relu(raw, config.leaky_slope);
    tape.segment_softmax(raw, index.dst.clone(), index.n_nodes)
}

/// One graph transformer layer. Dropout is applied to the output when
/// `training` is set.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParameterStore,
    config: &GraphTransformerConfig,
    layer: usize,
    index: &AttentionIndex,
    states: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var, TensorError> {
    let (n, d) = tape.shape(states);
    if n != index.n_nodes || d != config.hidden {
        return Err(TensorError::Shape {
            op: "graph transformer layer",
            left: (n, d),
            right: (index.n_nodes, config.hidden),
        });
    }
    let names = layer_names(config, layer);
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let alpha = attention_scores(tape, store, config, layer, h, index, states)?;
        let message = tape.param(store, &names.message[h])?;
        let messages = tape.matmul(states, message)?;
        let incoming = tape.gather_rows(messages, index.src.clone())?;
        let weighted = tape.scale_rows(incoming, alpha)?;
        heads.push(tape.scatter_add_rows(weighted, index.dst.clone(), n)?);
    }
    let attended = tape.concat_cols(&heads)?;
    let residual = tape.param(store, &names.residual)?;
    let carried = tape.matmul(states, residual)?;
    let sum = tape.add(carried, attended)?;
    let mut hidden = tape.leaky_relu(sum, config.leaky_slope);
    for (k, (wn, bn)) in names.ffn.iter().enumerate() {
        if k > 0 {
            hidden = tape.leaky_relu(hidden, config.leaky_slope);
        }
        let w = tape.param(store, wn)?;
        let b = tape.param(store, bn)?;
        hidden = tape.affine(hidden, w, b)?;
    }
    let gain = tape.param(store, &names.norm_gain)?;
    let bias = tape.param(store, &names.norm_bias)?;
    let out = tape.layer_norm(hidden, gain, bias, config.layer_norm_eps)?;
    tape.dropout(out, config.dropout, training, rng)
}

/// Runs all layers; returns final node states, one row per node.
pub fn encode_graph<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParameterStore,
    config: &GraphTransformerConfig,
    index: &AttentionIndex,
    features: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var, TensorError> {
    let mut states = features;
    for l in 0..config.layers {
        states = layer_forward(tape, store, config, l, index, states, training, rng)?;
    }
    Ok(states)
}
