//! The full relevance model: graph transformer, matcher and their
//! parameters, plus per-table preprocessing and checkpoint I/O.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::TextEncoder;
use crate::encoder::{self, AttentionIndex, GraphTransformerConfig};
use crate::graph::{build_graph, TabularGraph};
use crate::matcher::{self, ContextMode, MatchResult, MatcherConfig, PairEncoder};
use crate::numerics::checkpoint::{self, CheckpointError, Metadata};
use crate::numerics::{Matrix, ParameterStore, Tape, TensorError, Var};
use crate::table::{resolve_grid, Corpus, Table, TableContext, TableError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter {name}: checkpoint has shape {checkpoint:?}, configuration expects {expected:?}")]
    ShapeMismatch {
        name: String,
        checkpoint: (usize, usize),
        expected: (usize, usize),
    },
    #[error("checkpoint lacks parameter {0}")]
    MissingParameter(String),
    #[error("external context mode needs a pair encoder")]
    NoPairEncoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: GraphTransformerConfig,
    pub matcher: MatcherConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate().map_err(ModelError::Config)?;
        let m = &self.matcher;
        if m.match_dim == 0 || m.context_dim == 0 || m.mlp_hidden == 0 {
            return Err(ModelError::Config("matcher widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", m.dropout)));
        }
        Ok(())
    }

    /// Sets both the encoder and the scorer dropout.
    pub fn with_dropout(mut self, p: f64) -> Self {
        self.encoder.dropout = p;
        self.matcher.dropout = p;
        self
    }

    pub const METADATA_KEY: &'static str = "model.config";

    pub fn to_metadata(&self, meta: &mut Metadata) {
        meta.insert(
            Self::METADATA_KEY.into(),
            serde_json::to_string(self).expect("config serializes"),
        );
    }

    pub fn from_metadata(meta: &Metadata) -> Result<Self, ModelError> {
        let text = meta
            .get(Self::METADATA_KEY)
            .ok_or_else(|| ModelError::Config("checkpoint has no model configuration".into()))?;
        serde_json::from_str(text).map_err(|e| ModelError::Config(format!("stored configuration: {e}")))
    }
}

/// Parameters of the graph encoder and the query-graph matcher.
pub fn is_graph_branch(name: &str) -> bool {
    name.starts_with("gt.") || name.starts_with("match.")
}

/// Parameters updated by graph-context pre-training.
pub fn is_pretrainable(name: &str) -> bool {
    is_graph_branch(name) || name.starts_with("pretrain.")
}

/// A table reduced to what the model consumes.
#[derive(Debug, Clone)]
pub struct PreparedTable {
    pub id: String,
    pub context: TableContext,
    pub graph: TabularGraph,
    pub index: AttentionIndex,
    pub features: Matrix,
    /// Embedding of the joined caption and titles.
    pub context_vector: Vec<f64>,
}

pub fn prepare_table(table: &Table, text: &dyn TextEncoder) -> Result<PreparedTable, TableError> {
    let grid = resolve_grid(table)?;
    let graph = build_graph(table, &grid);
    Ok(PreparedTable {
        id: table.id.clone(),
        context: table.context.clone(),
        index: AttentionIndex::from_graph(&graph),
        features: encoder::init_node_features(&graph, text),
        context_vector: text.encode(&table.context.joined()),
        graph,
    })
}

/// Prepared tables in corpus (id) order with an id lookup.
#[derive(Debug, Clone, Default)]
pub struct PreparedCorpus {
    pub tables: Vec<PreparedTable>,
    index: std::collections::HashMap<String, usize>,
}

impl PreparedCorpus {
    pub fn new(tables: Vec<PreparedTable>) -> Self {
        let index = tables.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();
        PreparedCorpus { tables, index }
    }

    /// Prepares every table, collecting per-table failures.
    pub fn prepare(corpus: &Corpus, text: &dyn TextEncoder) -> Result<Self, Vec<(String, TableError)>> {
        let mut tables = Vec::with_capacity(corpus.len());
        let mut failures = Vec::new();
        for (id, table) in corpus {
            match prepare_table(table, text) {
                Ok(t) => tables.push(t),
                Err(e) => failures.push((id.clone(), e)),
            }
        }
        if failures.is_empty() {
            Ok(Self::new(tables))
        } else {
            Err(failures)
        }
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&PreparedTable> {
        self.position(id).map(|i| &self.tables[i])
    }
}

/// Tables per tape when encoding for inference.
const ENCODE_CHUNK: usize = 64;

/// Stacked inference node states; see [`Model::encode_tables`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTables {
    pub nodes: Matrix,
    pub blocks: Vec<(usize, usize)>,
}

/// Attention index of the disjoint union of the tables' graphs and the
/// first node of each.
pub fn union_index(tables: &[&PreparedTable]) -> (AttentionIndex, Vec<usize>) {
    let mut edges = Vec::new();
    let mut starts = Vec::with_capacity(tables.len());
    let mut offset = 0;
    for t in tables {
        starts.push(offset);
        edges.extend(t.graph.edges.iter().map(|&(s, d)| (s + offset, d + offset)));
        offset += t.graph.node_count();
    }
    (AttentionIndex::new(offset, &edges), starts)
}

/// A query with its graph-branch vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery {
    pub text: String,
    pub vector: Vec<f64>,
}

impl PreparedQuery {
    pub fn new(text: &str, encoder: &dyn TextEncoder) -> Self {
        PreparedQuery {
            text: text.to_string(),
            vector: encoder.encode(text),
        }
    }
}

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub pair_encoder: Option<Arc<dyn PairEncoder + Send + Sync>>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .field("pair_encoder", &self.pair_encoder.is_some())
            .finish()
    }
}

impl Model {
    /// Xavier-initialized model; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        encoder::init_params(&mut params, &config.encoder, &mut rng)?;
        matcher::init_params(&mut params, config.encoder.hidden, &config.matcher, &mut rng)?;
        Ok(Model {
            config,
            params,
            pair_encoder: None,
        })
    }

    pub fn with_pair_encoder(mut self, encoder: Arc<dyn PairEncoder + Send + Sync>) -> Self {
        self.pair_encoder = Some(encoder);
        self
    }

    pub fn check_input_dim(&self, dim: usize) -> Result<(), ModelError> {
        if dim != self.config.encoder.hidden {
            return Err(ModelError::Config(format!(
                "embedding dimension {dim} differs from hidden size {}",
                self.config.encoder.hidden
            )));
        }
        Ok(())
    }

    /// Projected final node states `v_i`, one row per node.
    pub fn encode_table<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        table: &PreparedTable,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let features = tape.constant(table.features.clone());
        self.encode_features(tape, &table.index, features, training, rng)
    }

    pub fn encode_features<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        index: &AttentionIndex,
        features: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        let cfg = &self.config.encoder;
        let states = encoder::encode_graph(tape, &self.params, cfg, index, features, training, rng)?;
        matcher::project_nodes(tape, &self.params, states, cfg.layer_norm_eps)
    }

    /// Encodes several tables as one disjoint graph. Returns the stacked
    /// projected node states and the first row of each table.
    pub fn encode_batch<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        tables: &[&PreparedTable],
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<usize>), TensorError> {
        let (index, starts) = union_index(tables);
        let views: Vec<_> = tables.iter().map(|t| t.features.view()).collect();
        let features = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|_| TensorError::Shape {
            op: "encode_batch",
            left: tables.first().map_or((0, 0), |t| t.features.dim()),
            right: tables.last().map_or((0, 0), |t| t.features.dim()),
        })?;
        let features = tape.constant(features);
        let nodes = self.encode_features(tape, &index, features, training, rng)?;
        Ok((nodes, starts))
    }

    /// Scores several candidate tables for one query in a single pass.
    /// `blocks[k]` is the `(first_row, rows)` of candidate `k` within
    /// `nodes`. Returns a `1 x C` score row and, per candidate, the
    /// pool argmax relative to its first node.
    #[allow(clippy::too_many_arguments)]
    pub fn score_candidates<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        nodes: Var,
        blocks: &[(usize, usize)],
        tables: &[&PreparedTable],
        query: &PreparedQuery,
        query_var: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<Vec<usize>>), ModelError> {
        let mut rows = Vec::with_capacity(blocks.iter().map(|b| b.1).sum());
        let mut starts = Vec::with_capacity(blocks.len());
        for &(first, len) in blocks {
            starts.push(rows.len());
            rows.extend(first..first + len);
        }
        let whole = rows.len() == tape.shape(nodes).0 && rows.iter().enumerate().all(|(i, &r)| i == r);
        let gathered = if whole { nodes } else { tape.gather_rows(nodes, rows.into())? };
        let hidden = matcher::match_nodes(tape, &self.params, gathered, query_var)?;
        let h_qd = tape.segment_max_rows(hidden, &starts)?;
        let argmax = tape.segment_argmax(h_qd).expect("segment pool");
        let h_qc = match self.config.matcher.context {
            ContextMode::StaticFusion => {
                let d = query.vector.len();
                let mut ctx = ndarray::Array2::zeros((tables.len(), d));
                for (k, t) in tables.iter().enumerate() {
                    ctx.row_mut(k).assign(&ndarray::ArrayView1::from(&t.context_vector));
                }
                let ctx = tape.constant(ctx);
                matcher::static_context_match(tape, &self.params, query_var, ctx)?
            }
            ContextMode::External => {
                let parts = tables
                    .iter()
                    .map(|t| self.context_match(tape, query, query_var, t))
                    .collect::<Result<Vec<_>, _>>()?;
                tape.concat_rows(&parts)?
            }
        };
        let s = matcher::score(tape, &self.params, h_qd, h_qc, self.config.matcher.dropout, training, rng)?;
        Ok((tape.transpose(s), argmax))
    }

    /// Query-context vector `h_qc` as a tape variable.
    pub fn context_match(
        &self,
        tape: &mut Tape,
        query: &PreparedQuery,
        query_var: Var,
        table: &PreparedTable,
    ) -> Result<Var, ModelError> {
        match self.config.matcher.context {
            ContextMode::StaticFusion => {
                let context = tape.row_vector(&table.context_vector);
                Ok(matcher::static_context_match(tape, &self.params, query_var, context)?)
            }
            ContextMode::External => {
                let enc = self.pair_encoder.as_ref().ok_or(ModelError::NoPairEncoder)?;
                let v = enc.encode_pair(&matcher::pair_input(&query.text, &table.context));
                Ok(tape.row_vector(&v))
            }
        }
    }

    /// Relevance score of `table` for `query`, given its encoded nodes.
    /// Returns the score variable, `h_qd`, `h_qc` and the pool argmax.
    #[allow(clippy::too_many_arguments)]
    pub fn score_encoded<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        nodes: Var,
        query: &PreparedQuery,
        query_var: Var,
        table: &PreparedTable,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var, Var, Vec<usize>), ModelError> {
        let hidden = matcher::match_nodes(tape, &self.params, nodes, query_var)?;
        let (h_qd, argmax) = matcher::pool(tape, hidden)?;
        let h_qc = self.context_match(tape, query, query_var, table)?;
        let s = matcher::score(tape, &self.params, h_qd, h_qc, self.config.matcher.dropout, training, rng)?;
        Ok((s, h_qd, h_qc, argmax))
    }

    /// Inference-mode score with all intermediate vectors.
    pub fn match_table(&self, query: &PreparedQuery, table: &PreparedTable) -> Result<MatchResult, ModelError> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nodes = self.encode_table(&mut tape, table, false, &mut rng)?;
        let q = tape.row_vector(&query.vector);
        let (s, h_qd, h_qc, pool_argmax) = self.score_encoded(&mut tape, nodes, query, q, table, false, &mut rng)?;
        Ok(MatchResult {
            score: tape.scalar(s),
            h_qd: tape.value(h_qd).iter().copied().collect(),
            h_qc: tape.value(h_qc).iter().copied().collect(),
            pool_argmax,
        })
    }

    /// Inference-mode node states of `tables`, stacked, with each table's
    /// `(first_row, rows)` block. Reused across queries by [`Model::rank`].
    pub fn encode_tables(&self, tables: &[&PreparedTable]) -> Result<EncodedTables, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut parts = Vec::new();
        let mut blocks = Vec::with_capacity(tables.len());
        let mut offset = 0;
        for chunk in tables.chunks(ENCODE_CHUNK) {
            let mut tape = Tape::new();
            let (nodes, _) = self.encode_batch(&mut tape, chunk, false, &mut rng)?;
            for t in chunk {
                let n = t.graph.node_count();
                blocks.push((offset, n));
                offset += n;
            }
            parts.push(tape.value(nodes).clone());
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let nodes = if views.is_empty() {
            Matrix::zeros((0, self.config.encoder.hidden))
        } else {
            ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
        };
        Ok(EncodedTables { nodes, blocks })
    }

    /// Inference scores of every table in `encoded` for `query`.
    pub fn score_all(
        &self,
        query: &PreparedQuery,
        tables: &[&PreparedTable],
        encoded: &EncodedTables,
    ) -> Result<Vec<f64>, ModelError> {
        let all: Vec<usize> = (0..tables.len()).collect();
        self.score_subset(query, tables, encoded, &all)
    }

    /// Inference scores of `tables[p]` for each `p` in `positions`;
    /// `tables` is aligned with `encoded`.
    pub fn score_subset(
        &self,
        query: &PreparedQuery,
        tables: &[&PreparedTable],
        encoded: &EncodedTables,
        positions: &[usize],
    ) -> Result<Vec<f64>, ModelError> {
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nodes = tape.constant(encoded.nodes.clone());
        let q = tape.row_vector(&query.vector);
        let blocks: Vec<(usize, usize)> = positions.iter().map(|&p| encoded.blocks[p]).collect();
        let chosen: Vec<&PreparedTable> = positions.iter().map(|&p| tables[p]).collect();
        let (s, _) = self.score_candidates(&mut tape, nodes, &blocks, &chosen, query, q, false, &mut rng)?;
        Ok(tape.value(s).iter().copied().collect())
    }

    /// Ranks `tables[p]` for `p` in `positions` (every table when `None`)
    /// by descending score, ties by id.
    pub fn rank(
        &self,
        query: &PreparedQuery,
        tables: &[&PreparedTable],
        encoded: &EncodedTables,
        positions: Option<&[usize]>,
    ) -> Result<Vec<(String, f64)>, ModelError> {
        let all: Vec<usize>;
        let positions = match positions {
            Some(p) => p,
            None => {
                all = (0..tables.len()).collect();
                &all
            }
        };
        let scores = self.score_subset(query, tables, encoded, positions)?;
        let mut ranked: Vec<(String, f64)> = positions.iter().map(|&p| tables[p].id.clone()).zip(scores).collect();
        sort_ranking(&mut ranked);
        Ok(ranked)
    }

    pub fn save(&self, path: &Path, extra: &Metadata) -> Result<(), ModelError> {
        let mut meta = extra.clone();
        self.config.to_metadata(&mut meta);
        checkpoint::save(path, &self.params, &meta)?;
        Ok(())
    }

    pub fn to_bytes(&self, extra: &Metadata) -> Vec<u8> {
        let mut meta = extra.clone();
        self.config.to_metadata(&mut meta);
        checkpoint::encode(&self.params, &meta)
    }

    /// Loads a checkpoint written by [`Model::save`], checking every
    /// parameter against the shapes its stored configuration implies.
    pub fn load(path: &Path) -> Result<(Self, Metadata), ModelError> {
        let (store, meta) = checkpoint::load(path)?;
        let config = ModelConfig::from_metadata(&meta)?;
        let mut model = Model::new(config, 0)?;
        check_shapes(&model.params, &store, |_| true)?;
        model.params = store;
        Ok((model, meta))
    }

    /// Copies graph-branch values from a pre-training checkpoint. Optimizer
    /// state restarts; shapes must match exactly.
    pub fn load_graph_branch(&mut self, path: &Path) -> Result<Metadata, ModelError> {
        let (store, meta) = checkpoint::load(path)?;
        check_shapes(&self.params, &store, is_graph_branch)?;
        for p in self.params.iter_mut().filter(|p| is_graph_branch(&p.name)) {
            p.value = store.get(&p.name).expect("checked").clone();
            p.m.fill(0.0);
            p.v.fill(0.0);
            p.step = 0;
        }
        Ok(meta)
    }
}

fn check_shapes(
    expected: &ParameterStore,
    found: &ParameterStore,
    filter: impl Fn(&str) -> bool,
) -> Result<(), ModelError> {
    for p in expected.iter().filter(|p| filter(&p.name)) {
        let got = found
            .get(&p.name)
            .ok_or_else(|| ModelError::MissingParameter(p.name.clone()))?;
        if got.dim() != p.value.dim() {
            return Err(ModelError::ShapeMismatch {
                name: p.name.clone(),
                checkpoint: got.dim(),
                expected: p.value.dim(),
            });
        }
    }
    Ok(())
}

/// Descending score, ties by ascending id.
pub fn sort_ranking(ranked: &mut [(String, f64)]) {
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}
