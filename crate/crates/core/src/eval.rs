//! BM25 baseline, ranking metrics, k-fold splits and TREC run files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::tokenize;
use crate::model::sort_ranking;
use crate::table::{Corpus, RetrievalInstance};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cutoff k must be positive")]
    BadCutoff,
    #[error("{queries} queries cannot be split into {folds} folds")]
    TooFewQueries { queries: usize, folds: usize },
    #[error("{path}:{line}: {message}")]
    RunFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Okapi BM25 over whitespace-free lowercase tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    doc_ids: Vec<String>,
    doc_len: Vec<usize>,
    avg_len: f64,
    /// term -> postings (doc, term frequency)
    postings: HashMap<String, Vec<(usize, usize)>>,
}

impl Bm25Index {
    pub fn new(docs: impl IntoIterator<Item = (String, String)>) -> Self {
        Self::with_params(docs, 1.2, 0.75)
    }

    pub fn with_params(docs: impl IntoIterator<Item = (String, String)>, k1: f64, b: f64) -> Self {
        let mut doc_ids = Vec::new();
        let mut doc_len = Vec::new();
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (d, (id, text)) in docs.into_iter().enumerate() {
            let tokens = tokenize(&text);
            let mut tf: BTreeMap<String, usize> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((d, n));
            }
            doc_ids.push(id);
            doc_len.push(tokens.len());
        }
        let avg_len = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<usize>() as f64 / doc_len.len() as f64
        };
        Bm25Index { k1, b, doc_ids, doc_len, avg_len, postings }
    }

    /// Indexes the flattened text (cells and context) of every table.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self::new(corpus.values().map(|t| (t.id.clone(), t.flat_text())))
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.doc_freq(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Scores of every indexed document, in index order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else { continue };
            let idf = self.idf(&term);
            for &(d, tf) in list {
                let tf = tf as f64;
                let norm = if self.avg_len > 0.0 {
                    1.0 - self.b + self.b * self.doc_len[d] as f64 / self.avg_len
                } else {
                    1.0
                };
                scores[d] += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        scores
    }

    /// Ranks `candidates` (or every document when `None`) by descending
    /// score, ties by id.
    pub fn rank(&self, query: &str, candidates: Option<&[String]>) -> Vec<(String, f64)> {
        let scores = self.scores(query);
        let mut ranked: Vec<(String, f64)> = match candidates {
            None => self.doc_ids.iter().cloned().zip(scores).collect(),
            Some(ids) => {
                let pos: HashMap<&str, usize> =
                    self.doc_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
                ids.iter()
                    .map(|id| (id.clone(), pos.get(id.as_str()).map_or(0.0, |&i| scores[i])))
                    .collect()
            }
        };
        sort_ranking(&mut ranked);
        ranked
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainKind {
    /// `2^g - 1`
    #[default]
    Exponential,
    /// `g`
    Linear,
}

impl GainKind {
    pub fn gain(self, grade: f64) -> f64 {
        match self {
            GainKind::Exponential => 2f64.powf(grade) - 1.0,
            GainKind::Linear => grade,
        }
    }
}

fn dcg(grades: &[f64], k: usize, gain: GainKind) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain.gain(g) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG at cutoff `k`; 0 when the ideal DCG is 0.
pub fn ndcg_at_k(ranked: &[f64], ideal: &[f64], k: usize, gain: GainKind) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::BadCutoff);
    }
    let mut sorted = ideal.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&sorted, k, gain);
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg(ranked, k, gain) / idcg)
}

/// Average precision with binary relevance `grade >= 1`. `total_relevant`
/// is the number of relevant items known for the query; relevant items
/// missing from the ranking count as zero precision. Pass `None` to average
/// over the relevant items in the ranking only.
pub fn average_precision(ranked: &[f64], total_relevant: Option<usize>) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &g) in ranked.iter().enumerate() {
        if g >= 1.0 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    let denom = total_relevant.unwrap_or(hits).max(hits);
    if denom == 0 {
        0.0
    } else {
        sum / denom as f64
    }
}

pub fn p_at_1(ranked: &[f64]) -> f64 {
    match ranked.first() {
        Some(&g) if g >= 1.0 => 1.0,
        _ => 0.0,
    }
}

pub const NDCG_CUTOFFS: [usize; 4] = [5, 10, 15, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ndcg: [f64; 4],
    pub ap: f64,
    pub p1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gain: GainKind,
    pub queries: Vec<QueryMetrics>,
    pub mean_ndcg: [f64; 4],
    pub map: f64,
    pub p_at_1: f64,
    /// Queries without any relevant judgment; excluded from the means.
    pub skipped: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: one line per query, then the means.
    pub fn to_text(&self) -> String {
        let width = self
            .queries
            .iter()
            .map(|q| q.query_id.len())
            .chain([4])
            .max()
            .unwrap_or(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "query", "ndcg@5", "ndcg@10", "ndcg@15", "ndcg@20", "ap", "p@1"
        );
        let mut line = |id: &str, n: &[f64; 4], ap: f64, p1: f64| {
            let _ = writeln!(
                out,
                "{id:<width$}  {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                n[0], n[1], n[2], n[3], ap, p1
            );
        };
        for q in &self.queries {
            line(&q.query_id, &q.ndcg, q.ap, q.p1);
        }
        line("all", &self.mean_ndcg, self.map, self.p_at_1);
        out
    }
}

/// Per query: ranked table ids with scores.
pub type RunFile = BTreeMap<String, Vec<(String, f64)>>;

/// Scores a run against judgments. Judged queries absent from the run get
/// zero for every metric; run entries without a judgment count as grade 0.
pub fn evaluate(run: &RunFile, judgments: &[RetrievalInstance], gain: GainKind) -> EvalReport {
    let mut queries = Vec::new();
    let mut skipped = Vec::new();
    for inst in judgments {
        if inst.relevant_count() == 0 {
            skipped.push(inst.query_id.clone());
            continue;
        }
        let ranked: Vec<f64> = run
            .get(&inst.query_id)
            .map(|list| list.iter().map(|(id, _)| inst.grade_of(id).unwrap_or(0) as f64).collect())
            .unwrap_or_default();
        let ideal: Vec<f64> = inst.candidates.iter().map(|(_, g)| *g as f64).collect();
        let mut ndcg = [0.0; 4];
        for (slot, k) in ndcg.iter_mut().zip(NDCG_CUTOFFS) {
            *slot = ndcg_at_k(&ranked, &ideal, k, gain).expect("positive cutoff");
        }
        queries.push(QueryMetrics {
            query_id: inst.query_id.clone(),
            ndcg,
            ap: average_precision(&ranked, Some(inst.relevant_count())),
            p1: p_at_1(&ranked),
        });
    }
    let n = queries.len().max(1) as f64;
    let mut mean_ndcg = [0.0; 4];
    for q in &queries {
        for (m, v) in mean_ndcg.iter_mut().zip(q.ndcg) {
            *m += v / n;
        }
    }
    EvalReport {
        gain,
        map: queries.iter().map(|q| q.ap).sum::<f64>() / n,
        p_at_1: queries.iter().map(|q| q.p1).sum::<f64>() / n,
        mean_ndcg,
        queries,
        skipped,
    }
}

/// Seeded shuffle cut into `k` contiguous folds whose sizes differ by at
/// most one. Returns `(train, test)` id lists per fold.
pub fn kfold_split(
    query_ids: &[String],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<String>, Vec<String>)>, EvalError> {
    if k == 0 || query_ids.len() < k {
        return Err(EvalError::TooFewQueries { queries: query_ids.len(), folds: k });
    }
    let mut ids = query_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = ids.len() / k;
    let extra = ids.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let test = ids[start..start + size].to_vec();
        let train = ids[..start].iter().chain(&ids[start + size..]).cloned().collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

/// TREC run text: `query_id Q0 table_id rank score tag`, scores with nine
/// significant digits.
pub fn format_run(run: &RunFile, tag: &str) -> String {
    let mut out = String::new();
    for (qid, list) in run {
        for (rank, (tid, score)) in list.iter().enumerate() {
            let _ = writeln!(out, "{qid} Q0 {tid} {} {:.8e} {tag}", rank + 1, score);
        }
    }
    out
}

pub fn write_run(path: &Path, run: &RunFile, tag: &str) -> Result<(), EvalError> {
    fs::write(path, format_run(run, tag)).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a TREC run, ordering each query's entries by rank.
pub fn parse_run(text: &str, path: &Path) -> Result<RunFile, EvalError> {
    let mut ranked: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::RunFormat {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let rank: usize = f[3].parse().map_err(|_| err(format!("bad rank {:?}", f[3])))?;
        let score: f64 = f[4].parse().map_err(|_| err(format!("bad score {:?}", f[4])))?;
        let entries = ranked.entry(f[0].to_string()).or_default();
        if entries.iter().any(|(_, id, _)| id == f[2]) {
            return Err(err(format!("table {} listed twice for query {}", f[2], f[0])));
        }
        entries.push((rank, f[2].to_string(), score));
    }
    Ok(ranked
        .into_iter()
        .map(|(q, mut list)| {
            list.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| b.2.total_cmp(&a.2)));
            (q, list.into_iter().map(|(_, id, s)| (id, s)).collect())
        })
        .collect())
}

pub fn read_run(path: &Path) -> Result<RunFile, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_run(&text, path)
}
