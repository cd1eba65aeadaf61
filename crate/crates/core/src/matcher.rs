//! Query-graph and query-context matching, the relevance scorer and the
//! max-pool attribution diagnostic.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{NodeKind, TabularGraph};
use crate::numerics::init::xavier_uniform;
use crate::numerics::{ParameterStore, Tape, TensorError, Var};
use crate::table::TableContext;

pub const PROJ_WEIGHT: &str = "match.proj.weight";
pub const PROJ_BIAS: &str = "match.proj.bias";
pub const PROJ_GAIN: &str = "match.norm.gain";
pub const PROJ_SHIFT: &str = "match.norm.bias";
pub const FUSE_WEIGHT: &str = "match.fuse.weight";
pub const FUSE_BIAS: &str = "match.fuse.bias";
pub const CONTEXT_WEIGHT: &str = "ctx.fuse.weight";
pub const CONTEXT_BIAS: &str = "ctx.fuse.bias";
pub const SCORE_HIDDEN_WEIGHT: &str = "score.hidden.weight";
pub const SCORE_HIDDEN_BIAS: &str = "score.hidden.bias";
pub const SCORE_OUT_WEIGHT: &str = "score.out.weight";
pub const SCORE_OUT_BIAS: &str = "score.out.bias";
pub const PRETRAIN_WEIGHT: &str = "pretrain.weight";
pub const PRETRAIN_BIAS: &str = "pretrain.bias";

/// Where the query-context vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    /// Embedding fusion of query and context followed by a tanh map.
    StaticFusion,
    /// Vectors supplied by an external sentence-pair encoder.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub match_dim: usize,
    pub context_dim: usize,
    pub mlp_hidden: usize,
    pub context: ContextMode,
    /// Dropout on the scorer input.
    pub dropout: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            match_dim: 300,
            context_dim: 300,
            mlp_hidden: 128,
            context: ContextMode::StaticFusion,
            dropout: 0.1,
        }
    }
}

pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    hidden: usize,
    config: &MatcherConfig,
    rng: &mut R,
) -> Result<(), TensorError> {
    let (d, dm, dc, w) = (hidden, config.match_dim, config.context_dim, config.mlp_hidden);
    store.insert(PROJ_WEIGHT, xavier_uniform((d, d), rng))?;
    store.insert(PROJ_BIAS, Array2::zeros((1, d)))?;
    store.insert(PROJ_GAIN, Array2::ones((1, d)))?;
    store.insert(PROJ_SHIFT, Array2::zeros((1, d)))?;
    store.insert(FUSE_WEIGHT, xavier_uniform((4 * d, dm), rng))?;
    store.insert(FUSE_BIAS, Array2::zeros((1, dm)))?;
    if config.context == ContextMode::StaticFusion {
        store.insert(CONTEXT_WEIGHT, xavier_uniform((4 * d, dc), rng))?;
        store.insert(CONTEXT_BIAS, Array2::zeros((1, dc)))?;
    }
    store.insert(SCORE_HIDDEN_WEIGHT, xavier_uniform((dm + dc, w), rng))?;
    store.insert(SCORE_HIDDEN_BIAS, Array2::zeros((1, w)))?;
    store.insert(SCORE_OUT_WEIGHT, xavier_uniform((w, 1), rng))?;
    store.insert(SCORE_OUT_BIAS, Array2::zeros((1, 1)))?;
    store.insert(PRETRAIN_WEIGHT, xavier_uniform((dm, 1), rng))?;
    store.insert(PRETRAIN_BIAS, Array2::zeros((1, 1)))?;
    Ok(())
}

/// `[v || q || v - q || v * q]` for every row of `nodes` against the
/// `1 x d` row `query`.
pub fn fuse(tape: &mut Tape, nodes: Var, query: Var) -> Result<Var, TensorError> {
    let (n, d) = tape.shape(nodes);
    let qd = tape.shape(query);
    if qd != (1, d) {
        return Err(TensorError::Shape { op: "fuse", left: (n, d), right: qd });
    }
    let q = tape.repeat_rows(query, n)?;
    let diff = tape.sub(nodes, q)?;
    let prod = tape.mul(nodes, q)?;
    tape.concat_cols(&[nodes, q, diff, prod])
}

/// Per-node affine map followed by LayerNorm.
pub fn project_nodes(tape: &mut Tape, store: &ParameterStore, states: Var, eps: f64) -> Result<Var, TensorError> {
    let w = tape.param(store, PROJ_WEIGHT)?;
    let b = tape.param(store, PROJ_BIAS)?;
    let g = tape.param(store, PROJ_GAIN)?;
    let s = tape.param(store, PROJ_SHIFT)?;
    let h = tape.affine(states, w, b)?;
    tape.layer_norm(h, g, s, eps)
}

/// Hidden matching states `tanh(W [fusion] + b)`, one row per node.
pub fn match_nodes(tape: &mut Tape, store: &ParameterStore, nodes: Var, query: Var) -> Result<Var, TensorError> {
    let fused = fuse(tape, nodes, query)?;
    let w = tape.param(store, FUSE_WEIGHT)?;
    let b = tape.param(store, FUSE_BIAS)?;
    let h = tape.affine(fused, w, b)?;
    Ok(tape.tanh(h))
}

/// Element-wise max over nodes and, per dimension, the lowest node index
/// attaining it.
pub fn pool(tape: &mut Tape, hidden: Var) -> Result<(Var, Vec<usize>), TensorError> {
    let pooled = tape.max_pool_rows(hidden)?;
    let argmax = tape.pool_argmax(pooled).expect("pool node").to_vec();
    Ok((pooled, argmax))
}

/// Default query-context branch: fuse query and joined-context embeddings,
/// then `tanh(W [fusion] + b)`.
pub fn static_context_match(
    tape: &mut Tape,
    store: &ParameterStore,
    query: Var,
    context: Var,
) -> Result<Var, TensorError> {
    let fused = fuse(tape, context, query)?;
    let w = tape.param(store, CONTEXT_WEIGHT)?;
    let b = tape.param(store, CONTEXT_BIAS)?;
    let h = tape.affine(fused, w, b)?;
    Ok(tape.tanh(h))
}

/// An external sentence-pair encoder (for example a pretrained
/// cross-encoder) returning its pooled first-position vector.
pub trait PairEncoder {
    fn dim(&self) -> usize;
    fn encode_pair(&self, input: &str) -> Vec<f64>;
}

/// Input text handed to a [`PairEncoder`].
pub fn pair_input(query: &str, context: &TableContext) -> String {
    format!(
        "{query} [SEP] {} [SEP] {} [SEP] {}",
        context.caption, context.page_title, context.section_title
    )
}

/// Relevance score from `[h_qd || h_qc]`: dropout, one tanh hidden layer,
/// then a linear scalar output.
pub fn score<R: Rng + ?Sized>(
    tape: &mut Tape,
    store: &ParameterStore,
    graph_match: Var,
    context_match: Var,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var, TensorError> {
    let joined = tape.concat_cols(&[graph_match, context_match])?;
    let joined = tape.dropout(joined, dropout, training, rng)?;
    let w1 = tape.param(store, SCORE_HIDDEN_WEIGHT)?;
    let b1 = tape.param(store, SCORE_HIDDEN_BIAS)?;
    let w2 = tape.param(store, SCORE_OUT_WEIGHT)?;
    let b2 = tape.param(store, SCORE_OUT_BIAS)?;
    let h = tape.affine(joined, w1, b1)?;
    let h = tape.tanh(h);
    tape.affine(h, w2, b2)
}

/// Graph-context pre-training head: affine map of `h_qd` to a scalar.
pub fn pretrain_score(tape: &mut Tape, store: &ParameterStore, graph_match: Var) -> Result<Var, TensorError> {
    let w = tape.param(store, PRETRAIN_WEIGHT)?;
    let b = tape.param(store, PRETRAIN_BIAS)?;
    tape.affine(graph_match, w, b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub score: f64,
    pub h_qd: Vec<f64>,
    pub h_qc: Vec<f64>,
    pub pool_argmax: Vec<usize>,
}

/// How many pooled dimensions each node won.
pub fn pool_frequencies(argmax: &[usize], n_nodes: usize) -> Vec<usize> {
    let mut freq = vec![0; n_nodes];
    for &n in argmax {
        freq[n] += 1;
    }
    freq
}

/// CSV with header `node_kind,row,col,cell_index,frequency`. Cells report
/// the top-left slot they occupy; row and column nodes leave the other axis
/// and the cell index empty.
pub fn attribution_csv(graph: &TabularGraph, frequencies: &[usize]) -> String {
    let mut out = String::from("node_kind,row,col,cell_index,frequency\n");
    for (node, freq) in graph.nodes.iter().zip(frequencies) {
        let line = match node.kind {
            NodeKind::Cell(id) => {
                let rect = graph.cells[id];
                format!("cell,{},{},{id},{freq}\n", rect.row, rect.col)
            }
            NodeKind::Row(r) => format!("row,{r},,,{freq}\n"),
            NodeKind::Col(c) => format!("col,,{c},,{freq}\n"),
        };
        out.push_str(&line);
    }
    out
}
