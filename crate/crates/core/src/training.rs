//! Ranking objectives, graph-context pre-training and the fine-tuning loop.

use std::collections::HashMap;
use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{is_pretrainable, Model, ModelError, PreparedCorpus, PreparedQuery, PreparedTable};
use crate::numerics::{AdamConfig, Gradients, Reduce, Tape, TensorError, Var};
use crate::table::RetrievalInstance;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("query {query_id:?} has {relevant} relevant candidates; the NLL objective needs exactly one, use MSE instead")]
    ObjectiveMismatch { query_id: String, relevant: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch} (queries {queries:?})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        queries: Vec<String>,
    },
    #[error("candidate table {0:?} is not in the prepared corpus")]
    UnknownTable(String),
    #[error("pre-training disabled: {0}")]
    PretrainDisabled(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("epoch callback: {0}")]
    Callback(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mse,
    Nll,
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Objective::Mse),
            "nll" => Ok(Objective::Nll),
            other => Err(format!("unknown objective {other:?} (expected mse or nll)")),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Mse => "mse",
            Objective::Nll => "nll",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Random negatives drawn per query per epoch when a query lists no
    /// irrelevant candidate.
    pub negatives: usize,
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Mse,
            lr: 1e-4,
            epochs: 5,
            batch_size: 16,
            warmup_steps: 100,
            dropout: 0.1,
            seed: 0,
            negatives: 9,
            pretrain: false,
            pretrain_epochs: 20,
            pretrain_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.pretrain_batch == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Double-averaged squared error: per query over its candidates, then over
/// queries. Each entry pairs a `1 x n` score row with its `n` labels.
/// Queries without candidates are skipped; `None` if nothing remains.
pub fn mse_loss(tape: &mut Tape, per_query: &[(Var, Vec<f64>)]) -> Result<Option<Var>, TensorError> {
    let mut means = Vec::with_capacity(per_query.len());
    for (scores, labels) in per_query {
        if labels.is_empty() {
            log::warn!("skipping a query with no candidates in the MSE loss");
            continue;
        }
        let target = tape.constant(Array2::from_shape_vec((1, labels.len()), labels.clone()).expect("row"));
        let diff = tape.sub(*scores, target)?;
        let sq = tape.mul(diff, diff)?;
        means.push(tape.mean(sq, Reduce::Cols)?);
    }
    if means.is_empty() {
        return Ok(None);
    }
    let all = tape.concat_cols(&means)?;
    Ok(Some(tape.mean(all, Reduce::Cols)?))
}

/// Mean negative log-softmax probability of each query's gold candidate.
/// Each entry pairs a `1 x n` score row with the gold column.
pub fn nll_loss(tape: &mut Tape, per_query: &[(Var, usize)]) -> Result<Var, TensorError> {
    if per_query.is_empty() {
        return Err(TensorError::Domain { op: "nll", message: "no queries".into() });
    }
    let mut picked = Vec::with_capacity(per_query.len());
    for &(scores, gold) in per_query {
        let logp = tape.log_softmax_rows(scores)?;
        picked.push(tape.pick(logp, 0, gold)?);
    }
    let all = tape.concat_cols(&picked)?;
    let mean = tape.mean(all, Reduce::Cols)?;
    Ok(tape.scale(mean, -1.0))
}

/// Index of the single relevant candidate, or an objective-mismatch error.
pub fn gold_index(instance: &RetrievalInstance) -> Result<usize, TrainError> {
    let relevant: Vec<usize> = instance
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, (_, g))| *g >= 1)
        .map(|(i, _)| i)
        .collect();
    match relevant.as_slice() {
        [one] => Ok(*one),
        _ => Err(TrainError::ObjectiveMismatch {
            query_id: instance.query_id.clone(),
            relevant: relevant.len(),
        }),
    }
}

/// Linear warmup to `base` over `warmup` steps, then linear decay to zero
/// at `total`. Steps count from 1.
pub fn lr_schedule(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step <= warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let remaining = total.saturating_sub(step) as f64;
    base * remaining / (total - warmup) as f64
}

/// Uniform draw among `pool` entries other than `own`.
pub fn sample_negative_context<R: Rng + ?Sized>(pool: &[usize], own: usize, rng: &mut R) -> Option<usize> {
    let others = pool.iter().filter(|&&i| i != own).count();
    if others == 0 {
        return None;
    }
    let k = rng.random_range(0..others);
    pool.iter().copied().filter(|&i| i != own).nth(k)
}

/// Table `table` with its own context as the positive query and the
/// context of table `negative` as the negative one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PretrainSample {
    pub table: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl StepLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("step log serializes")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

fn finish_step(
    model: &mut Model,
    tape: &Tape,
    loss: Var,
    lr: f64,
    keep: Option<fn(&str) -> bool>,
) -> Result<f64, TensorError> {
    let value = tape.scalar(loss);
    let mut grads: Gradients = tape.backward(loss, &model.params)?;
    if let Some(keep) = keep {
        grads.retain(&model.params, keep);
    }
    model.params.adam_step(&grads, lr, &AdamConfig::default());
    Ok(value)
}

/// One graph-context matching update. Returns the batch loss.
pub fn pretrain_step<R: Rng + ?Sized>(
    model: &mut Model,
    tables: &PreparedCorpus,
    batch: &[PretrainSample],
    lr: f64,
    rng: &mut R,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let batch_tables: Vec<&PreparedTable> = batch.iter().map(|s| &tables.tables[s.table]).collect();
    let (nodes, starts) = model.encode_batch(&mut tape, &batch_tables, true, rng)?;
    let mut per_sample = Vec::with_capacity(batch.len());
    for ((s, table), &start) in batch.iter().zip(&batch_tables).zip(&starts) {
        let n = table.graph.node_count();
        let own = if batch.len() == 1 {
            nodes
        } else {
            tape.gather_rows(nodes, (start..start + n).collect::<Vec<_>>().into())?
        };
        let mut scores = Vec::with_capacity(2);
        for ctx in [&table.context_vector, &tables.tables[s.negative].context_vector] {
            let q = tape.row_vector(ctx);
            let hidden = crate::matcher::match_nodes(&mut tape, &model.params, own, q)?;
            let (h_qd, _) = crate::matcher::pool(&mut tape, hidden)?;
            scores.push(crate::matcher::pretrain_score(&mut tape, &model.params, h_qd)?);
        }
        let row = tape.concat_cols(&scores)?;
        per_sample.push((row, vec![1.0, 0.0]));
    }
    let Some(loss) = mse_loss(&mut tape, &per_sample)? else {
        return Ok(0.0);
    };
    if !tape.scalar(loss).is_finite() {
        return Err(TrainError::NonFinite {
            epoch: 0,
            batch: 0,
            queries: batch.iter().map(|s| tables.tables[s.table].id.clone()).collect(),
        });
    }
    Ok(finish_step(model, &tape, loss, lr, Some(is_pretrainable))?)
}

/// Graph-context matching pre-training over every table with a non-empty
/// context, at a constant learning rate.
pub fn pretrain(
    model: &mut Model,
    tables: &PreparedCorpus,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    model.config = model.config.with_dropout(config.dropout);
    let pool: Vec<usize> = (0..tables.len())
        .filter(|&i| !tables.tables[i].context.is_empty())
        .collect();
    if pool.len() < 2 {
        return Err(TrainError::PretrainDisabled(format!(
            "{} table(s) with a caption or title; at least 2 are needed",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 1..=config.pretrain_epochs {
        let mut order = pool.clone();
        order.shuffle(&mut rng);
        let samples: Vec<PretrainSample> = order
            .iter()
            .map(|&t| PretrainSample {
                table: t,
                negative: sample_negative_context(&pool, t, &mut rng).expect("pool has two tables"),
            })
            .collect();
        let mut total = 0.0;
        let mut batches = 0;
        for (b, batch) in samples.chunks(config.pretrain_batch).enumerate() {
            step += 1;
            let loss = pretrain_step(model, tables, batch, config.lr, &mut rng).map_err(|e| match e {
                TrainError::NonFinite { queries, .. } => TrainError::NonFinite { epoch, batch: b, queries },
                other => other,
            })?;
            let log = StepLog { epoch, step, lr: config.lr, loss };
            on_step(&log);
            report.steps.push(log);
            total += loss;
            batches += 1;
        }
        report.epoch_losses.push(total / batches as f64);
        log::info!("pre-training epoch {epoch}: loss {:.6}", total / batches as f64);
    }
    Ok(report)
}

/// Candidates of one query for one epoch: table positions and labels.
fn epoch_candidates<R: Rng + ?Sized>(
    instance: &RetrievalInstance,
    tables: &PreparedCorpus,
    negatives: usize,
    rng: &mut R,
) -> Result<Vec<(usize, f64)>, TrainError> {
    let mut out = Vec::with_capacity(instance.candidates.len() + negatives);
    for (id, grade) in &instance.candidates {
        let pos = tables.position(id).ok_or_else(|| TrainError::UnknownTable(id.clone()))?;
        out.push((pos, *grade as f64));
    }
    let has_negative = instance.candidates.iter().any(|(_, g)| *g == 0);
    if !has_negative && negatives > 0 {
        let listed: Vec<usize> = out.iter().map(|(p, _)| *p).collect();
        let pool: Vec<usize> = (0..tables.len()).filter(|p| !listed.contains(p)).collect();
        let k = negatives.min(pool.len());
        for i in sample(rng, pool.len(), k).into_iter() {
            out.push((pool[i], 0.0));
        }
    }
    Ok(out)
}

/// Fine-tunes `model` on ranking instances. `on_epoch` runs after each
/// epoch with the epoch number; it may persist the model, and returning
/// `Break` ends training early.
pub fn train(
    model: &mut Model,
    instances: &[RetrievalInstance],
    queries: &[PreparedQuery],
    tables: &PreparedCorpus,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
    mut on_epoch: impl FnMut(usize, &Model) -> Result<ControlFlow<()>, TrainError>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    model.config = model.config.with_dropout(config.dropout);
    assert_eq!(instances.len(), queries.len(), "one prepared query per instance");
    let active: Vec<usize> = (0..instances.len())
        .filter(|&i| !instances[i].candidates.is_empty())
        .collect();
    let mut golds = HashMap::new();
    if config.objective == Objective::Nll {
        for &i in &active {
            golds.insert(i, gold_index(&instances[i])?);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let units_per_epoch = match config.objective {
        Objective::Nll => active.len(),
        Objective::Mse => active
            .iter()
            .map(|&i| {
                let c = &instances[i].candidates;
                if c.iter().any(|(_, g)| *g == 0) {
                    c.len()
                } else {
                    c.len() + config.negatives.min(tables.len().saturating_sub(c.len()))
                }
            })
            .sum(),
    };
    let batches_per_epoch = units_per_epoch.div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        // (query, candidate list, gold or label source)
        let mut per_query: Vec<(usize, Vec<(usize, f64)>)> = Vec::with_capacity(active.len());
        for &i in &active {
            per_query.push((i, epoch_candidates(&instances[i], tables, config.negatives, &mut rng)?));
        }
        let mut units: Vec<(usize, usize)> = match config.objective {
            Objective::Nll => (0..per_query.len()).map(|q| (q, usize::MAX)).collect(),
            Objective::Mse => per_query
                .iter()
                .enumerate()
                .flat_map(|(q, (_, c))| (0..c.len()).map(move |k| (q, k)))
                .collect(),
        };
        units.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, batch) in units.chunks(config.batch_size).enumerate() {
            step += 1;
            let lr = lr_schedule(step, config.lr, config.warmup_steps, total_steps);
            // group units by query, preserving first-appearance order
            let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
            for &(q, k) in batch {
                match groups.iter_mut().find(|(gq, _)| *gq == q) {
                    Some((_, ks)) => ks.push(k),
                    None => groups.push((q, vec![k])),
                }
            }
            let chosen: Vec<Vec<(usize, f64)>> = groups
                .iter()
                .map(|(q, ks)| {
                    let cands = &per_query[*q].1;
                    match config.objective {
                        Objective::Nll => cands.clone(),
                        Objective::Mse => ks.iter().map(|&k| cands[k]).collect(),
                    }
                })
                .collect();
            // every distinct table of the batch is encoded once
            let mut distinct: Vec<usize> = chosen.iter().flatten().map(|c| c.0).collect();
            distinct.sort_unstable();
            distinct.dedup();
            let batch_tables: Vec<&PreparedTable> = distinct.iter().map(|&p| &tables.tables[p]).collect();
            let mut tape = Tape::new();
            let (nodes, starts) = model.encode_batch(&mut tape, &batch_tables, true, &mut rng)?;
            let block_of: HashMap<usize, (usize, usize)> = distinct
                .iter()
                .zip(&starts)
                .map(|(&p, &st)| (p, (st, tables.tables[p].graph.node_count())))
                .collect();
            let mut mse_terms = Vec::new();
            let mut nll_terms = Vec::new();
            let mut names = Vec::new();
            for ((q, _), cands) in groups.iter().zip(&chosen) {
                let inst = per_query[*q].0;
                names.push(instances[inst].query_id.clone());
                let query = &queries[inst];
                let qv = tape.row_vector(&query.vector);
                let blocks: Vec<(usize, usize)> = cands.iter().map(|c| block_of[&c.0]).collect();
                let cand_tables: Vec<&PreparedTable> = cands.iter().map(|c| &tables.tables[c.0]).collect();
                let (row, _) =
                    model.score_candidates(&mut tape, nodes, &blocks, &cand_tables, query, qv, true, &mut rng)?;
                match config.objective {
                    Objective::Nll => nll_terms.push((row, golds[&inst])),
                    Objective::Mse => mse_terms.push((row, cands.iter().map(|c| c.1).collect())),
                }
            }
            let loss = match config.objective {
                Objective::Nll => nll_loss(&mut tape, &nll_terms)?,
                Objective::Mse => match mse_loss(&mut tape, &mse_terms)? {
                    Some(l) => l,
                    None => continue,
                },
            };
            if !tape.scalar(loss).is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b, queries: names });
            }
            let value = finish_step(model, &tape, loss, lr, None)?;
            let log = StepLog { epoch, step, lr, loss: value };
            on_step(&log);
            report.steps.push(log);
            total += value;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        report.epoch_losses.push(mean);
        log::info!("epoch {epoch}: loss {mean:.6}");
        if on_epoch(epoch, model)?.is_break() {
            break;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingTable;
    use crate::encoder::GraphTransformerConfig;
    use crate::matcher::{ContextMode, MatcherConfig};
    use crate::model::{prepare_table, ModelConfig};
    use crate::table::{Cell, Table, TableContext};
    use ndarray::array;

    fn row(t: &mut Tape, v: &[f64]) -> Var {
        t.row_vector(v)
    }

    #[test]
    fn mse_examples() {
        let mut t = Tape::new();
        let s = row(&mut t, &[1.0, 2.0]);
        let l = mse_loss(&mut t, &[(s, vec![1.0, 2.0])]).unwrap().unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let s = row(&mut t, &[0.0]);
        let l = mse_loss(&mut t, &[(s, vec![2.0])]).unwrap().unwrap();
        assert_eq!(t.scalar(l), 4.0);
        // per-query means 1 and 3, the second query having more candidates
        let a = row(&mut t, &[1.0]);
        let b = row(&mut t, &[3.0, 3.0, 3.0]);
        let l = mse_loss(&mut t, &[(a, vec![0.0]), (b, vec![3.0 - 3f64.sqrt(); 3])]).unwrap().unwrap();
        assert_close!(t.scalar(l), 2.0, 1e-12);
        let e = t.constant(Array2::zeros((1, 0)));
        assert!(mse_loss(&mut t, &[(e, vec![])]).unwrap().is_none());
    }

    #[test]
    fn nll_examples() {
        let mut t = Tape::new();
        let s = row(&mut t, &[0.3]);
        let l = nll_loss(&mut t, &[(s, 0)]).unwrap();
        assert_close!(t.scalar(l), 0.0, 1e-15);
        let s = row(&mut t, &[0.7, 0.7]);
        let l = nll_loss(&mut t, &[(s, 1)]).unwrap();
        assert_close!(t.scalar(l), 2f64.ln(), 1e-12);
        let s = row(&mut t, &[3f64.ln(), 0.0]);
        let l = nll_loss(&mut t, &[(s, 0)]).unwrap();
        assert_close!(t.scalar(l), -(0.75f64.ln()), 1e-12);
        // shift invariance
        let s = row(&mut t, &[3f64.ln() + 50.0, 50.0]);
        let l = nll_loss(&mut t, &[(s, 0)]).unwrap();
        assert_close!(t.scalar(l), -(0.75f64.ln()), 1e-12);
    }

    #[test]
    fn nll_requires_one_gold() {
        let inst = |c: Vec<u32>| RetrievalInstance {
            query_id: "q".into(),
            query_text: "x".into(),
            candidates: c.into_iter().enumerate().map(|(i, g)| (format!("t{i}"), g)).collect(),
        };
        assert_eq!(gold_index(&inst(vec![0, 2, 0])).unwrap(), 1);
        let err = gold_index(&inst(vec![1, 1])).unwrap_err();
        assert!(err.to_string().contains("MSE"));
        assert!(matches!(gold_index(&inst(vec![0])), Err(TrainError::ObjectiveMismatch { relevant: 0, .. })));
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_schedule(100, 1e-4, 100, 1000), 1e-4);
        assert_eq!(lr_schedule(1, 1e-4, 100, 1000), 1e-6);
        assert_eq!(lr_schedule(1000, 1e-4, 100, 1000), 0.0);
        assert!(lr_schedule(999, 1e-4, 100, 1000) <= 1e-4 / 900.0 + 1e-18);
        assert_eq!(lr_schedule(5, 0.1, 0, 10), 0.05);
        assert_close!(lr_schedule(3, 0.1, 10, 5), 0.03, 1e-15);
    }

    #[test]
    fn negative_contexts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_negative_context(&[0, 1], 0, &mut rng), Some(1));
        }
        assert_eq!(sample_negative_context(&[3], 3, &mut rng), None);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let n = sample_negative_context(&[0, 1, 2, 3, 4], 2, &mut rng).unwrap();
            counts[n] += 1;
        }
        assert_eq!(counts[2], 0);
        for (i, c) in counts.iter().enumerate() {
            if i != 2 {
                let f = *c as f64 / 10_000.0;
                assert!((0.22..=0.28).contains(&f), "{counts:?}");
            }
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: GraphTransformerConfig { layers: 1, heads: 2, hidden: 6, ffn_hidden: None, dropout: 0.0, leaky_slope: 0.2, layer_norm_eps: 1e-5 },
            matcher: MatcherConfig { match_dim: 4, context_dim: 4, mlp_hidden: 3, context: ContextMode::StaticFusion, dropout: 0.0 },
        }
    }

    fn fixture() -> (EmbeddingTable, PreparedCorpus) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let words = ["alpha", "beta", "gamma", "delta", "cap", "one", "two", "three", "four"];
        let emb = EmbeddingTable::from_pairs(6, words.iter().map(|w| (w.to_string(), (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())));
        let tables: Vec<_> = ["alpha", "beta", "gamma", "delta"]
            .iter()
            .zip(["one", "two", "three", "four"])
            .map(|(w, c)| {
                let t = Table {
                    id: w.to_string(),
                    rows: vec![vec![Cell::new(*w), Cell::new("cap")], vec![Cell::new("one"), Cell::new("two")]],
                    context: TableContext { caption: format!("cap {c}"), ..TableContext::default() },
                };
                prepare_table(&t, &emb).unwrap()
            })
            .collect();
        (emb, PreparedCorpus::new(tables))
    }

    #[test]
    fn pretraining_leaves_context_branch_untouched() {
        let (_, corpus) = fixture();
        let mut model = Model::new(tiny(), 3).unwrap();
        let before = model.params.clone();
        let config = TrainConfig { pretrain_epochs: 2, pretrain_batch: 2, lr: 1e-2, ..TrainConfig::default() };
        let report = pretrain(&mut model, &corpus, &config, |_| {}).unwrap();
        assert_eq!(report.steps.len(), 4);
        for p in model.params.iter() {
            let old = before.get(&p.name).unwrap();
            if is_pretrainable(&p.name) {
                continue;
            }
            assert_eq!(&p.value, old, "{} changed", p.name);
        }
        assert_ne!(model.params.get("gt.0.residual"), before.get("gt.0.residual"));
        assert_ne!(model.params.get(crate::matcher::PRETRAIN_WEIGHT), before.get(crate::matcher::PRETRAIN_WEIGHT));
    }

    #[test]
    fn pretraining_needs_two_contexts() {
        let (_, mut corpus) = fixture();
        for t in corpus.tables.iter_mut().skip(1) {
            t.context = TableContext::default();
        }
        let mut model = Model::new(tiny(), 3).unwrap();
        assert!(matches!(pretrain(&mut model, &corpus, &TrainConfig::default(), |_| {}), Err(TrainError::PretrainDisabled(_))));
    }

    #[test]
    fn perfect_pretrain_scores_give_zero_loss() {
        let mut t = Tape::new();
        let s = t.constant(array![[1.0, 0.0]]);
        let l = mse_loss(&mut t, &[(s, vec![1.0, 0.0])]).unwrap().unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let s = t.constant(array![[0.5, 0.5]]);
        let l = mse_loss(&mut t, &[(s, vec![1.0, 0.0])]).unwrap().unwrap();
        assert_eq!(t.scalar(l), 0.25);
    }

    fn instances() -> Vec<RetrievalInstance> {
        ["alpha", "beta", "gamma", "delta"]
            .iter()
            .map(|w| RetrievalInstance { query_id: format!("q-{w}"), query_text: w.to_string(), candidates: vec![(w.to_string(), 1)] })
            .collect()
    }

    #[test]
    fn zero_epochs_is_identity_and_training_is_deterministic() {
        let (emb, corpus) = fixture();
        let inst = instances();
        let queries: Vec<_> = inst.iter().map(|i| PreparedQuery::new(&i.query_text, &emb)).collect();
        let mut model = Model::new(tiny(), 5).unwrap();
        let init = model.params.clone();
        let zero = TrainConfig { epochs: 0, ..TrainConfig::default() };
        train(&mut model, &inst, &queries, &corpus, &zero, |_| {}, |_, _| Ok(ControlFlow::Continue(()))).unwrap();
        assert_eq!(model.params, init);

        let config = TrainConfig { objective: Objective::Nll, epochs: 3, batch_size: 2, warmup_steps: 1, lr: 1e-2, negatives: 2, ..TrainConfig::default() };
        let run = || {
            let mut m = Model::new(tiny(), 5).unwrap();
            let mut epochs = Vec::new();
            let r = train(&mut m, &inst, &queries, &corpus, &config, |_| {}, |e, _| {
                epochs.push(e);
                Ok(ControlFlow::Continue(()))
            })
            .unwrap();
            assert_eq!(epochs, vec![1, 2, 3]);
            (m.params, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.steps.len(), 6);
        assert_eq!(ra.steps.last().unwrap().lr, 0.0);

        let mut m = Model::new(tiny(), 5).unwrap();
        let stopped = train(&mut m, &inst, &queries, &corpus, &config, |_| {}, |e, _| {
            Ok(if e == 2 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
        })
        .unwrap();
        assert_eq!(stopped.epoch_losses.len(), 2);
    }

    #[test]
    fn mse_training_reduces_loss() {
        let (emb, corpus) = fixture();
        let inst = instances();
        let queries: Vec<_> = inst.iter().map(|i| PreparedQuery::new(&i.query_text, &emb)).collect();
        let mut model = Model::new(tiny(), 6).unwrap();
        let config = TrainConfig { objective: Objective::Mse, epochs: 30, batch_size: 4, warmup_steps: 0, lr: 1e-2, dropout: 0.0, negatives: 3, ..TrainConfig::default() };
        let r = train(&mut model, &inst, &queries, &corpus, &config, |_| {}, |_, _| Ok(ControlFlow::Continue(()))).unwrap();
        assert!(r.epoch_losses.last().unwrap() < &(r.epoch_losses[0] * 0.5), "{:?}", r.epoch_losses);
    }
}
