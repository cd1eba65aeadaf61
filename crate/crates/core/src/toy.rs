//! Seeded synthetic corpus for smoke tests and toy-scale experiments.
//!
//! Every table carries one invented keyword in a data cell. Queries name the
//! keyword of exactly one table plus a common filler word, so both lexical
//! and learned rankers can solve the task.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbeddingTable;
use crate::table::{write_corpus, write_qrels, write_queries, Cell, Corpus, RetrievalInstance, Table, TableContext};

const FILLER: [&str; 20] = [
    "year", "total", "region", "value", "count", "rate", "name", "type", "group", "score", "share", "index", "level",
    "price", "units", "north", "south", "east", "west", "average",
];
const NUMBERS: [&str; 12] = ["12", "17", "23", "31", "46", "58", "64", "75", "89", "93", "105", "240"];
const CAPTION_WORDS: [&str; 6] = ["summary", "statistics", "overview", "report", "figures", "survey"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub tables: usize,
    pub queries: usize,
    pub dim: usize,
    pub seed: u64,
    /// Put each table's keyword into its caption.
    pub echo_captions: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            tables: 64,
            queries: 32,
            dim: 300,
            seed: 17,
            echo_captions: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyData {
    pub corpus: Corpus,
    pub keywords: Vec<String>,
    pub instances: Vec<RetrievalInstance>,
    pub embeddings: EmbeddingTable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyPaths {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    pub embeddings: PathBuf,
}

fn keyword<R: Rng>(rng: &mut R) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    (0..3)
        .flat_map(|_| [C[rng.random_range(0..C.len())], V[rng.random_range(0..V.len())]])
        .map(char::from)
        .collect()
}

fn pick<'a, R: Rng>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

fn layout<R: Rng>(kind: usize, kw: &str, rng: &mut R) -> Vec<Vec<Cell>> {
    let f = |rng: &mut R| Cell::new(pick(rng, &FILLER));
    let n = |rng: &mut R| Cell::new(pick(rng, &NUMBERS));
    let mut rows: Vec<Vec<Cell>> = match kind {
        // plain 3 x 3
        0 => vec![
            vec![f(rng).header(), f(rng).header(), f(rng).header()],
            vec![f(rng), n(rng), n(rng)],
            vec![f(rng), n(rng), n(rng)],
        ],
        // plain 4 x 3
        1 => vec![
            vec![f(rng).header(), f(rng).header(), f(rng).header()],
            vec![f(rng), n(rng), n(rng)],
            vec![f(rng), n(rng), n(rng)],
            vec![f(rng), n(rng), n(rng)],
        ],
        // two-level header
        2 => vec![
            vec![
                Cell::spanning(pick(rng, &FILLER), 2, 1).header(),
                Cell::spanning(pick(rng, &FILLER), 1, 2).header(),
            ],
            vec![f(rng).header(), f(rng).header()],
            vec![f(rng), n(rng), n(rng)],
            vec![f(rng), n(rng), n(rng)],
        ],
        // row group spanning two rows
        _ => vec![
            vec![f(rng).header(), f(rng).header(), f(rng).header()],
            vec![Cell::spanning(pick(rng, &FILLER), 2, 1), f(rng), n(rng)],
            vec![f(rng), n(rng)],
            vec![f(rng), f(rng), n(rng)],
        ],
    };
    // the keyword replaces a plain body cell
    let body: Vec<(usize, usize)> = rows
        .iter()
        .enumerate()
        .skip(1)
        .flat_map(|(r, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, c)| !c.is_merged() && !c.is_header)
                .map(move |(c, _)| (r, c))
        })
        .collect();
    let (r, c) = body[rng.random_range(0..body.len())];
    rows[r][c].text = kw.to_string();
    rows
}

pub fn generate(config: &ToyConfig) -> ToyData {
    assert!(config.queries <= config.tables, "each query needs its own table");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = BTreeSet::new();
    let mut keywords = Vec::with_capacity(config.tables);
    while keywords.len() < config.tables {
        let k = keyword(&mut rng);
        if seen.insert(k.clone()) {
            keywords.push(k);
        }
    }
    let width = config.tables.to_string().len().max(2);
    let mut corpus = Corpus::new();
    for (i, kw) in keywords.iter().enumerate() {
        let rows = layout(i % 4, kw, &mut rng);
        let word = pick(&mut rng, &CAPTION_WORDS);
        let caption = if config.echo_captions {
            format!("{kw} {word}")
        } else {
            format!("{} {word}", pick(&mut rng, &FILLER))
        };
        let id = format!("t{i:0width$}");
        corpus.insert(
            id.clone(),
            Table {
                id,
                rows,
                context: TableContext {
                    caption,
                    page_title: "toy tables".into(),
                    section_title: String::new(),
                },
            },
        );
    }
    let ids: Vec<String> = corpus.keys().cloned().collect();
    let mut targets: Vec<usize> = (0..config.tables).collect();
    targets.shuffle(&mut rng);
    targets.truncate(config.queries);
    targets.sort_unstable();
    let instances = targets
        .iter()
        .enumerate()
        .map(|(q, &t)| RetrievalInstance {
            query_id: format!("q{q:0width$}"),
            query_text: format!("{} {}", keywords[t], pick(&mut rng, &FILLER)),
            candidates: vec![(ids[t].clone(), 1)],
        })
        .collect();

    let vocab: Vec<String> = keywords
        .iter()
        .cloned()
        .chain(FILLER.iter().chain(&NUMBERS).chain(&CAPTION_WORDS).map(|s| s.to_string()))
        .chain(["toy".to_string(), "tables".to_string()])
        .collect();
    let embeddings = EmbeddingTable::from_pairs(
        config.dim,
        vocab
            .into_iter()
            .map(|w| (w, (0..config.dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect::<Vec<_>>(),
    );
    ToyData {
        corpus,
        keywords,
        instances,
        embeddings,
    }
}

impl ToyData {
    /// Writes `corpus.jsonl`, `queries.tsv`, `qrels.txt` and
    /// `embeddings.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<ToyPaths> {
        std::fs::create_dir_all(dir)?;
        let paths = ToyPaths {
            corpus: dir.join("corpus.jsonl"),
            queries: dir.join("queries.tsv"),
            qrels: dir.join("qrels.txt"),
            embeddings: dir.join("embeddings.txt"),
        };
        write_corpus(&paths.corpus, self.corpus.values())?;
        write_queries(&paths.queries, &self.instances)?;
        write_qrels(&paths.qrels, &self.instances)?;
        self.embeddings.write(&paths.embeddings)?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::{load_corpus, load_instances, resolve_grid};

    #[test]
    fn toy_corpus_shape() {
        let data = generate(&ToyConfig::default());
        assert_eq!(data.corpus.len(), 64);
        assert_eq!(data.instances.len(), 32);
        let merged = data.corpus.values().filter(|t| t.merged_cell_count() > 0).count();
        assert_eq!(merged, 32);
        for t in data.corpus.values() {
            let grid = resolve_grid(t).unwrap();
            assert_eq!(grid.padded_cells(), 0, "{}", t.id);
        }
        // each query keyword occurs in exactly one table
        for inst in &data.instances {
            let kw = inst.query_text.split(' ').next().unwrap();
            let hits: Vec<&String> = data
                .corpus
                .values()
                .filter(|t| t.cells().any(|c| c.text == kw))
                .map(|t| &t.id)
                .collect();
            assert_eq!(hits, vec![&inst.candidates[0].0]);
        }
    }

    #[test]
    fn deterministic_and_round_trips() {
        let a = generate(&ToyConfig { dim: 8, ..ToyConfig::default() });
        let b = generate(&ToyConfig { dim: 8, ..ToyConfig::default() });
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.embeddings, b.embeddings);
        let dir = tempfile::tempdir().unwrap();
        let paths = a.write(dir.path()).unwrap();
        assert_eq!(load_corpus(&paths.corpus).unwrap(), a.corpus);
        let set = load_instances(&paths.queries, &paths.qrels, &a.corpus).unwrap();
        assert_eq!(set.instances, a.instances);
        assert_eq!(EmbeddingTable::load(&paths.embeddings).unwrap(), a.embeddings);
    }

    #[test]
    fn echo_captions_name_the_keyword() {
        let data = generate(&ToyConfig { dim: 4, echo_captions: true, ..ToyConfig::default() });
        for (t, kw) in data.corpus.values().zip(&data.keywords) {
            assert!(t.context.caption.starts_with(kw.as_str()));
        }
    }
}
