//! Commands behind the `tabret` binary: convert, pretrain, train, rank,
//! evaluate, inspect and toy-corpus generation.
//!
//! Every command returns its primary result as well as writing it, so the
//! same code path serves the binary and the tests.

pub mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use tabret_core::embedding::{EmbeddingError, EmbeddingTable};
use tabret_core::eval::{self, Bm25Index, EvalError, EvalReport, GainKind, RunFile};
use tabret_core::graph::{build_graph, graph_stats};
use tabret_core::matcher::{attribution_csv, pool_frequencies};
use tabret_core::model::{Model, ModelConfig, ModelError, PreparedCorpus, PreparedQuery, PreparedTable};
use tabret_core::numerics::checkpoint::Metadata;
use tabret_core::table::{
    load_corpus, load_instances, parse_qrels, parse_table_json, resolve_grid, Corpus, RetrievalInstance, TableError,
};
use tabret_core::toy::{generate, ToyConfig, ToyPaths};
use tabret_core::training::{self, StepLog, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent input data.
    #[error("{0}")]
    Data(String),
    /// Bad flags, config files or incompatible artifacts.
    #[error("{0}")]
    Config(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 1,
            CliError::Config(_) => 2,
        }
    }
}

impl From<TableError> for CliError {
    fn from(e: TableError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::ShapeMismatch { .. } | ModelError::MissingParameter(_) => {
                CliError::Config(e.to_string())
            }
            ModelError::Checkpoint(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Config(_) | TrainError::ObjectiveMismatch { .. } => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::TooFewQueries { .. } | EvalError::BadCutoff => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Which tables a query is ranked against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RankScope {
    /// The query's judged candidates when they include a non-relevant
    /// table, otherwise the whole corpus.
    #[default]
    Auto,
    Candidates,
    Corpus,
}

impl FromStr for RankScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(RankScope::Auto),
            "candidates" => Ok(RankScope::Candidates),
            "corpus" => Ok(RankScope::Corpus),
            _ => Err(format!("unknown rank scope {s:?} (auto, candidates or corpus)")),
        }
    }
}

impl RankScope {
    /// Candidate ids to rank for `instance`; `None` means the corpus.
    pub fn candidates(self, instance: &RetrievalInstance) -> Option<Vec<String>> {
        let listed = || instance.candidates.iter().map(|(id, _)| id.clone()).collect();
        match self {
            RankScope::Corpus => None,
            RankScope::Candidates => Some(listed()),
            RankScope::Auto => instance.candidates.iter().any(|(_, g)| *g == 0).then(listed),
        }
    }
}

/// Everything a command may need, after merging flags and config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub folds: Option<usize>,
    pub workers: usize,
    pub rank_scope: RankScope,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub gain: GainKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            queries: None,
            qrels: None,
            embeddings: None,
            checkpoint: None,
            out: None,
            train: TrainConfig::default(),
            folds: None,
            workers: 1,
            rank_scope: RankScope::Auto,
            layers: None,
            heads: None,
            gain: GainKind::Exponential,
        }
    }
}

impl RunConfig {
    fn need<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        let path = value
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("--{flag} is required")))?;
        if flag != "out" && !path.exists() {
            return Err(CliError::Config(format!("--{flag} {} does not exist", path.display())));
        }
        Ok(path)
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        let dir = self.need(&self.out, "out")?;
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(dir)
    }

    fn model_config(&self, dim: usize) -> Result<ModelConfig, CliError> {
        let mut config = ModelConfig::default();
        config.encoder.hidden = dim;
        if let Some(l) = self.layers {
            config.encoder.layers = l;
        }
        if let Some(h) = self.heads {
            config.encoder.heads = h;
        }
        config.validate()?;
        Ok(config.with_dropout(self.train.dropout))
    }

    fn metadata(&self, command: &str) -> Metadata {
        let t = &self.train;
        Metadata::from([
            ("command".to_string(), command.to_string()),
            ("seed".to_string(), t.seed.to_string()),
            ("objective".to_string(), t.objective.to_string()),
            ("lr".to_string(), format!("{:?}", t.lr)),
            ("epochs".to_string(), t.epochs.to_string()),
            ("batch_size".to_string(), t.batch_size.to_string()),
            ("warmup".to_string(), t.warmup_steps.to_string()),
        ])
    }

    fn run_tag(&self) -> String {
        format!("tabret-seed{}", self.train.seed)
    }
}

fn load_embeddings(path: &Path) -> Result<EmbeddingTable, CliError> {
    let emb = EmbeddingTable::load(path)?;
    log::info!("loaded {} embedding(s) of dimension {}", emb.len(), emb.dim());
    Ok(emb)
}

fn prepare(corpus: &Corpus, emb: &EmbeddingTable) -> Result<PreparedCorpus, CliError> {
    PreparedCorpus::prepare(corpus, emb).map_err(|failures| {
        let lines: Vec<String> = failures.iter().map(|(id, e)| format!("table {id}: {e}")).collect();
        CliError::Data(lines.join("\n"))
    })
}

/// Writes JSON lines, one header then one record per step.
struct JsonLog(BufWriter<File>);

impl JsonLog {
    fn create(path: &Path, header: &impl Serialize) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut log = JsonLog(BufWriter::new(file));
        log.line(&serde_json::to_string(header).expect("header serializes"));
        Ok(log)
    }

    fn line(&mut self, text: &str) {
        if let Err(e) = writeln!(self.0, "{text}") {
            log::warn!("training log write failed: {e}");
        }
    }

    fn step(&mut self, s: &StepLog) {
        self.line(&s.to_json());
    }

    fn finish(mut self) {
        let _ = self.0.flush();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConvertStats {
    pub table_count: usize,
    pub merged_table_count: usize,
    pub node_total: usize,
    pub edge_total: usize,
    pub cell_nodes: usize,
    pub row_nodes: usize,
    pub col_nodes: usize,
    pub failed: Vec<String>,
}

/// Builds every table's graph. Writes `graphs/<id>.json` and `stats.json`
/// under `out`. Unreadable lines and bad layouts are collected; any
/// failure makes the command fail after the good tables are written.
pub fn cmd_convert(corpus: &Path, out: &Path) -> Result<ConvertStats, CliError> {
    let text = fs::read_to_string(corpus).map_err(|e| io_err(corpus, e))?;
    let graphs = out.join("graphs");
    fs::create_dir_all(&graphs).map_err(|e| io_err(&graphs, e))?;
    let mut stats = ConvertStats::default();
    let mut seen = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let result = parse_table_json(line.as_bytes()).and_then(|t| {
            let grid = resolve_grid(&t)?;
            Ok((t, grid))
        });
        let (table, grid) = match result {
            Ok(ok) => ok,
            Err(e) => {
                let msg = format!("{}:{}: {e}", corpus.display(), i + 1);
                log::error!("{msg}");
                stats.failed.push(msg);
                continue;
            }
        };
        if let Some(first) = seen.insert(table.id.clone(), i + 1) {
            let msg = format!("{}:{}: duplicate table id {:?} (first on line {first})", corpus.display(), i + 1, table.id);
            log::error!("{msg}");
            stats.failed.push(msg);
            continue;
        }
        let graph = build_graph(&table, &grid);
        let g = graph_stats(&graph);
        stats.table_count += 1;
        stats.merged_table_count += usize::from(g.merged_cells > 0);
        stats.node_total += graph.node_count();
        stats.edge_total += g.edges;
        stats.cell_nodes += g.cell_nodes;
        stats.row_nodes += g.row_nodes;
        stats.col_nodes += g.col_nodes;
        let path = graphs.join(format!("{}.json", sanitize(&table.id)));
        fs::write(&path, graph.to_json()).map_err(|e| io_err(&path, e))?;
    }
    let stats_path = out.join("stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&stats).expect("stats serialize"))
        .map_err(|e| io_err(&stats_path, e))?;
    if stats.failed.is_empty() {
        Ok(stats)
    } else {
        Err(CliError::Data(format!("{} table(s) failed:\n{}", stats.failed.len(), stats.failed.join("\n"))))
    }
}

/// File-system safe version of an id.
pub fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct PretrainHeader<'a> {
    command: &'a str,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    tables: usize,
}

/// Graph-context pre-training. Writes `pretrain.ckpt` and
/// `pretrain_log.jsonl` under `out`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let corpus = load_corpus(cfg.need(&cfg.corpus, "corpus")?)?;
    let emb = load_embeddings(cfg.need(&cfg.embeddings, "embeddings")?)?;
    let out = cfg.out_dir()?;
    let tables = prepare(&corpus, &emb)?;
    run_pretraining(cfg, &tables, cfg.model_config(emb.dim())?, out)
}

fn run_pretraining(cfg: &RunConfig, tables: &PreparedCorpus, config: ModelConfig, out: &Path) -> Result<PathBuf, CliError> {
    let mut model = Model::new(config, cfg.train.seed)?;
    let header = PretrainHeader {
        command: "pretrain",
        epochs: cfg.train.pretrain_epochs,
        batch_size: cfg.train.pretrain_batch,
        lr: cfg.train.lr,
        seed: cfg.train.seed,
        tables: tables.len(),
    };
    let mut log = JsonLog::create(&out.join("pretrain_log.jsonl"), &header)?;
    let result = training::pretrain(&mut model, tables, &cfg.train, |s| log.step(s));
    log.finish();
    if let Err(TrainError::PretrainDisabled(msg)) = &result {
        log::error!("pre-training disabled: {msg}");
    }
    result?;
    let path = out.join("pretrain.ckpt");
    let mut meta = cfg.metadata("pretrain");
    meta.insert("epochs".into(), cfg.train.pretrain_epochs.to_string());
    meta.insert("batch_size".into(), cfg.train.pretrain_batch.to_string());
    model.save(&path, &meta)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub run: RunFile,
    pub run_path: PathBuf,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize)]
struct TrainHeader<'a> {
    command: &'a str,
    fold: Option<usize>,
    objective: String,
    epochs: usize,
    batch_size: usize,
    warmup: usize,
    lr: f64,
    dropout: f64,
    negatives: usize,
    seed: u64,
    queries: usize,
}

#[derive(Serialize)]
struct SeededReport<'a> {
    seed: u64,
    folds: Option<usize>,
    report: &'a EvalReport,
}

fn load_judged(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<RetrievalInstance>, CliError> {
    let set = load_instances(cfg.need(&cfg.queries, "queries")?, cfg.need(&cfg.qrels, "qrels")?, corpus)?;
    Ok(set.instances.into_iter().filter(|i| !i.candidates.is_empty()).collect())
}

/// Fine-tunes the ranker. With `--folds k`, runs k-fold cross-validation:
/// one model per fold under `fold-<i>/`, a pooled run over the test folds
/// and a pooled report. Otherwise trains on every query and ranks the
/// training queries. Always writes `run.txt`, `report.json` and
/// `report.txt` under `out`. With the pretrain flag and no checkpoint, a
/// pre-training run comes first and seeds every model's graph branch.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let corpus = load_corpus(cfg.need(&cfg.corpus, "corpus")?)?;
    let emb = load_embeddings(cfg.need(&cfg.embeddings, "embeddings")?)?;
    let given = cfg.checkpoint.as_deref().map(|_| cfg.need(&cfg.checkpoint, "checkpoint")).transpose()?;
    let out = cfg.out_dir()?;
    let instances = load_judged(cfg, &corpus)?;
    let tables = prepare(&corpus, &emb)?;
    let model_config = cfg.model_config(emb.dim())?;
    let own = match given {
        None if cfg.train.pretrain => Some(run_pretraining(cfg, &tables, model_config, out)?),
        _ => None,
    };
    let pretrained = given.or(own.as_deref());

    let fit = |train_ids: &[&RetrievalInstance], dir: &Path, fold: Option<usize>| -> Result<(Model, PathBuf), CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut model = Model::new(model_config, cfg.train.seed)?;
        if let Some(p) = pretrained {
            model.load_graph_branch(p)?;
            log::info!("initialized graph branch from {}", p.display());
        }
        let subset: Vec<RetrievalInstance> = train_ids.iter().map(|i| (*i).clone()).collect();
        let queries: Vec<PreparedQuery> = subset.iter().map(|i| PreparedQuery::new(&i.query_text, &emb)).collect();
        let t = &cfg.train;
        let header = TrainHeader {
            command: "train",
            fold,
            objective: t.objective.to_string(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            warmup: t.warmup_steps,
            lr: t.lr,
            dropout: t.dropout,
            negatives: t.negatives,
            seed: t.seed,
            queries: subset.len(),
        };
        let mut log = JsonLog::create(&dir.join("train_log.jsonl"), &header)?;
        let mut meta = cfg.metadata("train");
        if let Some(f) = fold {
            meta.insert("fold".into(), f.to_string());
        }
        let last = dir.join("last.ckpt");
        let result = training::train(&mut model, &subset, &queries, &tables, t, |s| log.step(s), |epoch, m| {
            let mut meta = meta.clone();
            meta.insert("epoch".into(), epoch.to_string());
            m.save(&last, &meta).map_err(|e| TrainError::Callback(e.to_string()))?;
            Ok(ControlFlow::Continue(()))
        });
        log.finish();
        result?;
        let path = dir.join("model.ckpt");
        model.save(&path, &meta)?;
        log::info!("wrote {}", path.display());
        Ok((model, path))
    };

    let mut run = RunFile::new();
    let mut checkpoints = Vec::new();
    match cfg.folds {
        Some(k) if k > 1 => {
            let ids: Vec<String> = instances.iter().map(|i| i.query_id.clone()).collect();
            for (f, (train_ids, test_ids)) in eval::kfold_split(&ids, k, cfg.train.seed)?.into_iter().enumerate() {
                log::info!("fold {f}: {} training, {} test queries", train_ids.len(), test_ids.len());
                let pick = |set: &[String]| -> Vec<&RetrievalInstance> {
                    instances.iter().filter(|i| set.contains(&i.query_id)).collect()
                };
                let (model, path) = fit(&pick(&train_ids), &out.join(format!("fold-{f}")), Some(f))?;
                checkpoints.push(path);
                run.extend(rank_with_model(&model, &pick(&test_ids), &tables, &emb, cfg.rank_scope, cfg.workers)?);
            }
        }
        _ => {
            let all: Vec<&RetrievalInstance> = instances.iter().collect();
            let (model, path) = fit(&all, out, None)?;
            checkpoints.push(path);
            run = rank_with_model(&model, &all, &tables, &emb, cfg.rank_scope, cfg.workers)?;
        }
    }
    let run_path = out.join("run.txt");
    eval::write_run(&run_path, &run, &cfg.run_tag())?;
    let report = eval::evaluate(&run, &instances, cfg.gain);
    write_report(out, &report, cfg.train.seed, cfg.folds)?;
    Ok(TrainOutcome { checkpoints, run, run_path, report })
}

fn write_report(dir: &Path, report: &EvalReport, seed: u64, folds: Option<usize>) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(&SeededReport { seed, folds, report }).expect("report serializes");
    let path = dir.join("report.json");
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    let path = dir.join("report.txt");
    fs::write(&path, report.to_text()).map_err(|e| io_err(&path, e))
}

/// Ranks each instance's scope with a trained model, spreading queries
/// over `workers` threads. Output does not depend on `workers`.
pub fn rank_with_model(
    model: &Model,
    instances: &[&RetrievalInstance],
    tables: &PreparedCorpus,
    emb: &EmbeddingTable,
    scope: RankScope,
    workers: usize,
) -> Result<RunFile, CliError> {
    model.check_input_dim(emb.dim())?;
    let refs: Vec<&PreparedTable> = tables.tables.iter().collect();
    let encoded = model.encode_tables(&refs)?;
    let rank_one = |inst: &RetrievalInstance| -> Result<(String, Vec<(String, f64)>), CliError> {
        let query = PreparedQuery::new(&inst.query_text, emb);
        let positions = match scope.candidates(inst) {
            None => None,
            Some(ids) => Some(
                ids.iter()
                    .map(|id| tables.position(id).ok_or_else(|| CliError::Data(format!("unknown table {id}"))))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        let ranked = model.rank(&query, &refs, &encoded, positions.as_deref())?;
        Ok((inst.query_id.clone(), ranked))
    };
    let workers = workers.max(1).min(instances.len().max(1));
    let chunk = instances.len().div_ceil(workers).max(1);
    let results: Vec<Result<(String, Vec<(String, f64)>), CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = instances
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|i| rank_one(i)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("ranking worker panicked")).collect()
    });
    results.into_iter().collect()
}

/// Ranks queries with BM25 over the flattened table text.
pub fn rank_with_bm25(corpus: &Corpus, instances: &[&RetrievalInstance], scope: RankScope) -> RunFile {
    let index = Bm25Index::from_corpus(corpus);
    instances
        .iter()
        .map(|inst| {
            let cands = scope.candidates(inst);
            (inst.query_id.clone(), index.rank(&inst.query_text, cands.as_deref()))
        })
        .collect()
}

/// Query/candidate pairs for ranking. With qrels the judged candidates are
/// attached; without, every query ranks the corpus.
fn rank_instances(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<RetrievalInstance>, CliError> {
    let queries_path = cfg.need(&cfg.queries, "queries")?;
    match cfg.qrels {
        Some(_) => Ok(load_instances(queries_path, cfg.need(&cfg.qrels, "qrels")?, corpus)?.instances),
        None => {
            let text = fs::read_to_string(queries_path).map_err(|e| io_err(queries_path, e))?;
            let queries = tabret_core::table::parse_queries(&text, queries_path)?;
            Ok(queries
                .into_iter()
                .map(|(query_id, query_text)| RetrievalInstance { query_id, query_text, candidates: Vec::new() })
                .collect())
        }
    }
}

/// Ranks with a checkpoint (or BM25 when `bm25` is set) and writes the TREC
/// run to `--out`.
pub fn cmd_rank(cfg: &RunConfig, bm25: bool) -> Result<RunFile, CliError> {
    let corpus = load_corpus(cfg.need(&cfg.corpus, "corpus")?)?;
    let instances = rank_instances(cfg, &corpus)?;
    let refs: Vec<&RetrievalInstance> = instances.iter().collect();
    let (run, tag) = if bm25 {
        (rank_with_bm25(&corpus, &refs, cfg.rank_scope), "bm25".to_string())
    } else {
        let emb = load_embeddings(cfg.need(&cfg.embeddings, "embeddings")?)?;
        let (model, meta) = Model::load(cfg.need(&cfg.checkpoint, "checkpoint")?)?;
        let tables = prepare(&corpus, &emb)?;
        let tag = meta.get("seed").map_or_else(|| "tabret".to_string(), |s| format!("tabret-seed{s}"));
        (rank_with_model(&model, &refs, &tables, &emb, cfg.rank_scope, cfg.workers)?, tag)
    };
    let out = cfg.need(&cfg.out, "out")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    eval::write_run(out, &run, &tag)?;
    log::info!("wrote {} ranked quer(ies) to {}", run.len(), out.display());
    Ok(run)
}

/// Judgments grouped by query, in qrels order.
pub fn judgments_from_qrels(path: &Path) -> Result<Vec<RetrievalInstance>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out: Vec<RetrievalInstance> = Vec::new();
    for (qid, tid, grade, _) in parse_qrels(&text, path)? {
        match out.iter_mut().find(|i| i.query_id == qid) {
            Some(inst) => match inst.candidates.iter_mut().find(|(id, _)| *id == tid) {
                Some(c) => c.1 = grade,
                None => inst.candidates.push((tid, grade)),
            },
            None => out.push(RetrievalInstance { query_id: qid, query_text: String::new(), candidates: vec![(tid, grade)] }),
        }
    }
    Ok(out)
}

/// Evaluates any TREC run against qrels. Writes the JSON report to `out`
/// when given.
pub fn cmd_evaluate(run: &Path, qrels: &Path, gain: GainKind, out: Option<&Path>) -> Result<EvalReport, CliError> {
    let run = eval::read_run(run)?;
    let judgments = judgments_from_qrels(qrels)?;
    let report = eval::evaluate(&run, &judgments, gain);
    if let Some(path) = out {
        fs::write(path, report.to_json()).map_err(|e| io_err(path, e))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribution {
    pub query_id: String,
    pub table_id: String,
    pub frequencies: Vec<usize>,
    pub csv: String,
}

/// Max-pool attribution of one table for one query.
pub fn attribution(model: &Model, query: &PreparedQuery, table: &PreparedTable) -> Result<(Vec<usize>, String), CliError> {
    let result = model.match_table(query, table)?;
    let freq = pool_frequencies(&result.pool_argmax, table.graph.node_count());
    let csv = attribution_csv(&table.graph, &freq);
    Ok((freq, csv))
}

/// Attribution CSVs. With `query` set, for that text against `table` (or
/// every table); otherwise for every query of `--queries` against `table`
/// (or every table). Files go to `out/<query>__<table>.csv` when `out` is
/// set.
pub fn cmd_inspect(cfg: &RunConfig, query: Option<&str>, table: Option<&str>) -> Result<Vec<Attribution>, CliError> {
    let corpus = load_corpus(cfg.need(&cfg.corpus, "corpus")?)?;
    let emb = load_embeddings(cfg.need(&cfg.embeddings, "embeddings")?)?;
    let (model, _) = Model::load(cfg.need(&cfg.checkpoint, "checkpoint")?)?;
    model.check_input_dim(emb.dim())?;
    let chosen: Vec<&tabret_core::table::Table> = match table {
        Some(id) => vec![corpus.get(id).ok_or_else(|| CliError::Data(format!("table {id:?} is not in the corpus")))?],
        None => corpus.values().collect(),
    };
    let queries: Vec<(String, String)> = match query {
        Some(text) => vec![("query".to_string(), text.to_string())],
        None => {
            let path = cfg.need(&cfg.queries, "queries")?;
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            tabret_core::table::parse_queries(&text, path)?
        }
    };
    let out = cfg.out.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let prepared: Vec<PreparedTable> = chosen
        .iter()
        .map(|t| tabret_core::model::prepare_table(t, &emb))
        .collect::<Result<_, _>>()?;
    let mut results = Vec::new();
    for (qid, text) in &queries {
        let q = PreparedQuery::new(text, &emb);
        for t in &prepared {
            let (frequencies, csv) = attribution(&model, &q, t)?;
            if let Some(dir) = out {
                let path = dir.join(format!("{}__{}.csv", sanitize(qid), sanitize(&t.id)));
                fs::write(&path, &csv).map_err(|e| io_err(&path, e))?;
            }
            results.push(Attribution { query_id: qid.clone(), table_id: t.id.clone(), frequencies, csv });
        }
    }
    Ok(results)
}

/// Writes the synthetic toy corpus into `out`.
pub fn cmd_toy(out: &Path, config: &ToyConfig) -> Result<ToyPaths, CliError> {
    generate(config).write(out).map_err(|e| io_err(out, e))
}
