//! Tables, their contexts, span resolution and the dataset file formats.
//!
//! Tables are stored row-major with explicit spans, the way HTML lays them
//! out. [`resolve_grid`] places every cell on an occupancy grid using
//! first-fit semantics so that adjacency between merged cells is well
//! defined.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("malformed table JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("schema error at cell (row {row}, position {pos}): {message}")]
    Schema {
        row: usize,
        pos: usize,
        message: String,
    },
    #[error("table {id:?}: {message}")]
    Invalid { id: String, message: String },
    #[error(
        "span collision at grid slot ({slot_row}, {slot_col}): cell (row {}, position {}) overlaps cell (row {}, position {})",
        first.0, first.1, second.0, second.1
    )]
    Layout {
        slot_row: usize,
        slot_col: usize,
        first: (usize, usize),
        second: (usize, usize),
    },
    #[error("duplicate table id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("{} corpus line(s) failed to parse: {}", .0.len(), format_line_errors(.0))]
    Lines(Vec<(usize, String)>),
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("qrels reference unknown query id {query_id:?} ({path}:{line})")]
    UnknownQuery {
        query_id: String,
        path: PathBuf,
        line: usize,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn format_line_errors(errors: &[(usize, String)]) -> String {
    errors
        .iter()
        .map(|(line, msg)| format!("line {line}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub text: String,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub row_span: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub col_span: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_header: bool,
}

impl Cell {
    pub fn new(text: impl Into<String>) -> Self {
        Cell {
            text: text.into(),
            row_span: 1,
            col_span: 1,
            is_header: false,
        }
    }

    pub fn spanning(text: impl Into<String>, row_span: usize, col_span: usize) -> Self {
        Cell {
            text: text.into(),
            row_span,
            col_span,
            is_header: false,
        }
    }

    pub fn header(mut self) -> Self {
        self.is_header = true;
        self
    }

    pub fn is_merged(&self) -> bool {
        self.row_span > 1 || self.col_span > 1
    }
}

/// Caption and titles attached to a table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableContext {
    #[serde(default)]
    pub caption: String,
    #[serde(default)]
    pub page_title: String,
    #[serde(default)]
    pub section_title: String,
}

impl TableContext {
    pub fn is_empty(&self) -> bool {
        self.caption.trim().is_empty()
            && self.page_title.trim().is_empty()
            && self.section_title.trim().is_empty()
    }

    /// Caption, page title and section title joined by single spaces,
    /// skipping empty fields.
    pub fn joined(&self) -> String {
        [&self.caption, &self.page_title, &self.section_title]
            .into_iter()
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub rows: Vec<Vec<Cell>>,
    #[serde(default)]
    pub context: TableContext,
}

impl Table {
    pub fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.rows.iter().flatten()
    }

    pub fn cell_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn merged_cell_count(&self) -> usize {
        self.cells().filter(|c| c.is_merged()).count()
    }

    /// All cell texts followed by the context fields, whitespace-joined.
    pub fn flat_text(&self) -> String {
        let mut parts: Vec<&str> = self.cells().map(|c| c.text.as_str()).collect();
        parts.push(&self.context.caption);
        parts.push(&self.context.page_title);
        parts.push(&self.context.section_title);
        parts
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("table serialization cannot fail")
    }

    fn validate(&self) -> Result<(), TableError> {
        if self.rows.is_empty() {
            return Err(TableError::Invalid {
                id: self.id.clone(),
                message: "table has no rows".into(),
            });
        }
        if let Some(r) = self.rows.iter().position(Vec::is_empty) {
            return Err(TableError::Invalid {
                id: self.id.clone(),
                message: format!("row {r} is empty"),
            });
        }
        Ok(())
    }
}

// Spans are read as signed integers so that zero and negative values surface
// as schema errors with a coordinate instead of a generic type error.
#[derive(Deserialize)]
struct RawCell {
    text: String,
    row_span: Option<i64>,
    col_span: Option<i64>,
    #[serde(default)]
    is_header: bool,
}

#[derive(Deserialize)]
struct RawTable {
    id: String,
    rows: Vec<Vec<RawCell>>,
    #[serde(default)]
    context: TableContext,
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Parses one table in the canonical JSON schema. Absent spans default to 1.
pub fn parse_table_json(bytes: &[u8]) -> Result<Table, TableError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TableError::Parse {
        offset: e.valid_up_to(),
        message: "input is not valid UTF-8".into(),
    })?;
    let raw: RawTable = serde_json::from_str(text).map_err(|e| TableError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;

    let mut rows = Vec::with_capacity(raw.rows.len());
    for (r, raw_row) in raw.rows.into_iter().enumerate() {
        let mut row = Vec::with_capacity(raw_row.len());
        for (pos, cell) in raw_row.into_iter().enumerate() {
            let span = |value: Option<i64>, name: &str| -> Result<usize, TableError> {
                match value {
                    None => Ok(1),
                    Some(v) if v >= 1 => Ok(v as usize),
                    Some(v) => Err(TableError::Schema {
                        row: r,
                        pos,
                        message: format!("{name} must be >= 1, got {v}"),
                    }),
                }
            };
            row.push(Cell {
                row_span: span(cell.row_span, "row_span")?,
                col_span: span(cell.col_span, "col_span")?,
                text: cell.text,
                is_header: cell.is_header,
            });
        }
        rows.push(row);
    }
    let table = Table {
        id: raw.id,
        rows,
        context: raw.context,
    };
    table.validate()?;
    Ok(table)
}

/// Placement of one cell on the occupancy grid. Rows and columns are
/// half-open: the cell covers `row..row + row_span` by `col..col + col_span`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub row: usize,
    pub col: usize,
    pub row_span: usize,
    pub col_span: usize,
}

impl CellRect {
    pub fn row_end(&self) -> usize {
        self.row + self.row_span
    }

    pub fn col_end(&self) -> usize {
        self.col + self.col_span
    }

    pub fn area(&self) -> usize {
        self.row_span * self.col_span
    }
}

/// Resolved layout of a table. Cell ids index the flat row-major cell list;
/// ids at or beyond `declared_cells` are synthetic empty padding cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridIndex {
    pub n_rows: usize,
    pub n_cols: usize,
    pub occupancy: Vec<Vec<usize>>,
    pub cells: Vec<CellRect>,
    pub declared_cells: usize,
}

impl GridIndex {
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn padded_cells(&self) -> usize {
        self.cells.len() - self.declared_cells
    }

    pub fn is_synthetic(&self, cell_id: usize) -> bool {
        cell_id >= self.declared_cells
    }

    pub fn at(&self, row: usize, col: usize) -> usize {
        self.occupancy[row][col]
    }
}

/// Places every cell with HTML-style first-fit: each cell takes the leftmost
/// free slot of its declared row and claims its span rectangle. Slots left
/// uncovered are filled with synthetic empty cells.
pub fn resolve_grid(table: &Table) -> Result<GridIndex, TableError> {
    // slot -> (cell id, declared coordinate)
    let mut claimed: Vec<Vec<Option<(usize, (usize, usize))>>> = Vec::new();
    let mut cells = Vec::with_capacity(table.cell_count());

    for (r, row) in table.rows.iter().enumerate() {
        let mut cursor = 0usize;
        for (pos, cell) in row.iter().enumerate() {
            let needed = r + cell.row_span;
            if claimed.len() < needed {
                claimed.resize_with(needed, Vec::new);
            }
            while claimed[r].get(cursor).copied().flatten().is_some() {
                cursor += 1;
            }
            let id = cells.len();
            for rr in r..r + cell.row_span {
                let line = &mut claimed[rr];
                if line.len() < cursor + cell.col_span {
                    line.resize(cursor + cell.col_span, None);
                }
                for (cc, slot) in line
                    .iter_mut()
                    .enumerate()
                    .skip(cursor)
                    .take(cell.col_span)
                {
                    if let Some((_, other)) = *slot {
                        return Err(TableError::Layout {
                            slot_row: rr,
                            slot_col: cc,
                            first: other,
                            second: (r, pos),
                        });
                    }
                    *slot = Some((id, (r, pos)));
                }
            }
            cells.push(CellRect {
                row: r,
                col: cursor,
                row_span: cell.row_span,
                col_span: cell.col_span,
            });
            cursor += cell.col_span;
        }
    }

    let declared_cells = cells.len();
    let n_rows = claimed.len();
    let n_cols = claimed.iter().map(Vec::len).max().unwrap_or(0);
    let mut occupancy = vec![vec![0usize; n_cols]; n_rows];
    for (r, line) in claimed.iter().enumerate() {
        for c in 0..n_cols {
            occupancy[r][c] = match line.get(c).copied().flatten() {
                Some((id, _)) => id,
                None => {
                    cells.push(CellRect {
                        row: r,
                        col: c,
                        row_span: 1,
                        col_span: 1,
                    });
                    cells.len() - 1
                }
            };
        }
    }
    if cells.len() > declared_cells {
        log::warn!(
            "table {:?}: padded {} uncovered grid slot(s) with empty cells",
            table.id,
            cells.len() - declared_cells
        );
    }
    Ok(GridIndex {
        n_rows,
        n_cols,
        occupancy,
        cells,
        declared_cells,
    })
}

/// Text of a grid cell id; synthetic padding cells are empty.
pub fn cell_text<'a>(table: &'a Table, grid: &GridIndex, cell_id: usize) -> &'a str {
    if grid.is_synthetic(cell_id) {
        ""
    } else {
        table
            .cells()
            .nth(cell_id)
            .map(|c| c.text.as_str())
            .unwrap_or("")
    }
}

pub type Corpus = BTreeMap<String, Table>;

fn read_to_string(path: &Path) -> Result<String, TableError> {
    fs::read_to_string(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a JSON-lines corpus, one table per line. Blank lines are ignored.
pub fn load_corpus(path: &Path) -> Result<Corpus, TableError> {
    parse_corpus(&read_to_string(path)?)
}

pub fn parse_corpus(text: &str) -> Result<Corpus, TableError> {
    let mut corpus = Corpus::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_table_json(line.as_bytes()) {
            Ok(table) => {
                if let Some(&first_line) = first_seen.get(&table.id) {
                    return Err(TableError::DuplicateId {
                        id: table.id,
                        first_line,
                        second_line: line_no,
                    });
                }
                first_seen.insert(table.id.clone(), line_no);
                corpus.insert(table.id.clone(), table);
            }
            Err(e) => errors.push((line_no, e.to_string())),
        }
    }
    if !errors.is_empty() {
        return Err(TableError::Lines(errors));
    }
    log::info!("loaded {} table(s)", corpus.len());
    Ok(corpus)
}

pub fn write_corpus<'a>(
    path: &Path,
    tables: impl IntoIterator<Item = &'a Table>,
) -> std::io::Result<()> {
    let mut out = String::new();
    for t in tables {
        out.push_str(&t.to_json());
        out.push('\n');
    }
    fs::write(path, out)
}

/// A query with its candidate tables and graded relevance labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalInstance {
    pub query_id: String,
    pub query_text: String,
    pub candidates: Vec<(String, u32)>,
}

impl RetrievalInstance {
    pub fn relevant_count(&self) -> usize {
        self.candidates.iter().filter(|(_, g)| *g >= 1).count()
    }

    pub fn grade_of(&self, table_id: &str) -> Option<u32> {
        self.candidates
            .iter()
            .find(|(id, _)| id == table_id)
            .map(|(_, g)| *g)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstanceSet {
    pub instances: Vec<RetrievalInstance>,
    /// Qrel lines skipped because their table is not in the corpus.
    pub skipped_unknown_tables: usize,
    /// Queries without any usable qrel line.
    pub empty_queries: Vec<String>,
}

/// Parses TREC qrels (`query_id 0 table_id grade`) into ordered triples.
pub fn parse_qrels(text: &str, path: &Path) -> Result<Vec<(String, String, u32, usize)>, TableError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(TableError::Format {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let grade: u32 = fields[3].parse().map_err(|_| TableError::Format {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("grade {:?} is not a non-negative integer", fields[3]),
        })?;
        out.push((fields[0].to_string(), fields[2].to_string(), grade, line_no));
    }
    Ok(out)
}

/// Reads a query TSV and TREC qrels into one instance per query, keeping
/// only candidates present in `corpus`.
pub fn load_instances(
    query_path: &Path,
    qrel_path: &Path,
    corpus: &Corpus,
) -> Result<InstanceSet, TableError> {
    let queries = read_to_string(query_path)?;
    let qrels = read_to_string(qrel_path)?;
    build_instances(&queries, query_path, &qrels, qrel_path, corpus)
}

pub fn parse_queries(text: &str, path: &Path) -> Result<Vec<(String, String)>, TableError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, query) = line.split_once('\t').ok_or_else(|| TableError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: "expected `query_id<TAB>query_text`".into(),
        })?;
        if !seen.insert(id.to_string()) {
            return Err(TableError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("duplicate query id {id:?}"),
            });
        }
        out.push((id.to_string(), query.to_string()));
    }
    Ok(out)
}

pub fn build_instances(
    queries: &str,
    query_path: &Path,
    qrels: &str,
    qrel_path: &Path,
    corpus: &Corpus,
) -> Result<InstanceSet, TableError> {
    let queries = parse_queries(queries, query_path)?;
    let index: HashMap<&str, usize> = queries
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i))
        .collect();
    let mut candidates: Vec<Vec<(String, u32)>> = vec![Vec::new(); queries.len()];
    let mut skipped = 0usize;
    for (qid, tid, grade, line) in parse_qrels(qrels, qrel_path)? {
        let &qi = index
            .get(qid.as_str())
            .ok_or_else(|| TableError::UnknownQuery {
                query_id: qid.clone(),
                path: qrel_path.to_path_buf(),
                line,
            })?;
        if !corpus.contains_key(&tid) {
            skipped += 1;
            continue;
        }
        match candidates[qi].iter_mut().find(|(id, _)| *id == tid) {
            Some(existing) => existing.1 = grade,
            None => candidates[qi].push((tid, grade)),
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} qrel line(s) naming tables outside the corpus");
    }
    let mut set = InstanceSet {
        skipped_unknown_tables: skipped,
        ..InstanceSet::default()
    };
    for ((query_id, query_text), cands) in queries.into_iter().zip(candidates) {
        if cands.is_empty() {
            log::warn!("query {query_id:?} has no candidates");
            set.empty_queries.push(query_id.clone());
        }
        set.instances.push(RetrievalInstance {
            query_id,
            query_text,
            candidates: cands,
        });
    }
    Ok(set)
}

pub fn write_queries(path: &Path, instances: &[RetrievalInstance]) -> std::io::Result<()> {
    let body: String = instances
        .iter()
        .map(|i| format!("{}\t{}\n", i.query_id, i.query_text))
        .collect();
    fs::write(path, body)
}

pub fn write_qrels(path: &Path, instances: &[RetrievalInstance]) -> std::io::Result<()> {
    let mut body = String::new();
    for inst in instances {
        for (tid, grade) in &inst.candidates {
            body.push_str(&format!("{} 0 {} {}\n", inst.query_id, tid, grade));
        }
    }
    fs::write(path, body)
}

/// A nested-header table in the style of a national taxing-wages summary:
/// 11 cells, four of them merged, one spanning two rows.
pub fn taxing_wages_example() -> Table {
    Table {
        id: "taxing-wages".into(),
        rows: vec![
            vec![
                Cell::spanning("Year", 2, 1).header(),
                Cell::spanning("Wages", 1, 2).header(),
                Cell::spanning("Tax rate", 2, 1).header(),
            ],
            vec![Cell::new("Gross").header(), Cell::new("Net").header()],
            vec![
                Cell::new("2019"),
                Cell::new("54,000"),
                Cell::new("41,900"),
                Cell::new("22.4%"),
            ],
            vec![Cell::spanning("Source: OECD", 1, 3), Cell::new("2020")],
        ],
        context: TableContext {
            caption: "Taxing wages in the United States".into(),
            page_title: "Taxation in the United States".into(),
            section_title: "Payroll taxes".into(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(id: &str, texts: &[&[&str]]) -> Table {
        Table {
            id: id.into(),
            rows: texts
                .iter()
                .map(|r| r.iter().map(|t| Cell::new(*t)).collect())
                .collect(),
            context: TableContext::default(),
        }
    }

    #[test]
    fn default_spans_are_one() {
        let json = r#"{"id":"t1","rows":[[{"text":"a"}]],"context":{"caption":"c","page_title":"","section_title":""}}"#;
        let t = parse_table_json(json.as_bytes()).unwrap();
        assert_eq!(t.cell_count(), 1);
        assert_eq!(t.rows[0][0].row_span, 1);
        assert_eq!(t.rows[0][0].col_span, 1);
        assert_eq!(t.context.caption, "c");
    }

    #[test]
    fn two_by_two_parses() {
        let json = r#"{"id":"t","rows":[[{"text":"a"},{"text":"b"}],[{"text":"c"},{"text":"d"}]],"context":{}}"#;
        let t = parse_table_json(json.as_bytes()).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows.iter().all(|r| r.len() == 2));
        assert_eq!(t.rows[1][1].text, "d");
    }

    #[test]
    fn taxing_wages_round_trips_with_spans() {
        let t = taxing_wages_example();
        let parsed = parse_table_json(t.to_json().as_bytes()).unwrap();
        assert_eq!(parsed, t);
        assert_eq!(parsed.cell_count(), 11);
        assert_eq!(parsed.merged_cell_count(), 4);
    }

    #[test]
    fn zero_span_names_the_cell() {
        let json = r#"{"id":"t","rows":[[{"text":"a"},{"text":"b","col_span":0}]]}"#;
        match parse_table_json(json.as_bytes()) {
            Err(TableError::Schema { row: 0, pos: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let json = r#"{"id":"t","rows":[[{"text":"a","row_span":-2}]]}"#;
        assert!(matches!(
            parse_table_json(json.as_bytes()),
            Err(TableError::Schema { row: 0, pos: 0, .. })
        ));
    }

    #[test]
    fn malformed_json_reports_offset() {
        let json = br#"{"id":"t","rows":[[{"text":"a"}],}"#;
        match parse_table_json(json) {
            Err(TableError::Parse { offset, .. }) => assert!(offset > 0 && offset <= json.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_rows_are_rejected() {
        assert!(parse_table_json(br#"{"id":"t","rows":[]}"#).is_err());
        assert!(parse_table_json(br#"{"id":"t","rows":[[{"text":"a"}],[]]}"#).is_err());
    }

    #[test]
    fn plain_grid() {
        let g = resolve_grid(&plain("t", &[&["a", "b"], &["c", "d"]])).unwrap();
        assert_eq!((g.n_rows, g.n_cols), (2, 2));
        assert_eq!(g.occupancy, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(g.padded_cells(), 0);
    }

    #[test]
    fn col_span_first_row() {
        let t = Table {
            id: "t".into(),
            rows: vec![
                vec![Cell::spanning("h", 1, 2)],
                vec![Cell::new("a"), Cell::new("b")],
            ],
            context: TableContext::default(),
        };
        let g = resolve_grid(&t).unwrap();
        assert_eq!(g.occupancy, vec![vec![0, 0], vec![1, 2]]);
    }

    #[test]
    fn row_span_pushes_next_row_right() {
        let t = Table {
            id: "t".into(),
            rows: vec![
                vec![Cell::spanning("h", 2, 1), Cell::new("a")],
                vec![Cell::new("b")],
            ],
            context: TableContext::default(),
        };
        let g = resolve_grid(&t).unwrap();
        assert_eq!(g.occupancy, vec![vec![0, 1], vec![0, 2]]);
        assert_eq!(g.cells[2], CellRect { row: 1, col: 1, row_span: 1, col_span: 1 });
    }

    #[test]
    fn ragged_rows_are_padded() {
        let g = resolve_grid(&plain("t", &[&["a", "b", "c"], &["d"]])).unwrap();
        assert_eq!(g.n_cols, 3);
        assert_eq!(g.padded_cells(), 2);
        assert_eq!(g.occupancy[1], vec![3, 4, 5]);
        assert!(g.is_synthetic(4));
    }

    #[test]
    fn row_span_past_last_row_extends_grid() {
        let t = Table {
            id: "t".into(),
            rows: vec![vec![Cell::spanning("x", 3, 1), Cell::new("y")]],
            context: TableContext::default(),
        };
        let g = resolve_grid(&t).unwrap();
        assert_eq!((g.n_rows, g.n_cols), (3, 2));
        assert_eq!(g.padded_cells(), 2);
    }

    #[test]
    fn collision_names_both_cells() {
        let t = Table {
            id: "t".into(),
            rows: vec![
                vec![Cell::new("a"), Cell::spanning("b", 2, 1)],
                vec![Cell::spanning("c", 1, 2)],
            ],
            context: TableContext::default(),
        };
        match resolve_grid(&t) {
            Err(TableError::Layout { first, second, slot_row, slot_col }) => {
                assert_eq!(first, (0, 1));
                assert_eq!(second, (1, 0));
                assert_eq!((slot_row, slot_col), (1, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corpus_loading() {
        assert!(parse_corpus("").unwrap().is_empty());
        let lines: String = ["t1", "t2", "t3"]
            .iter()
            .map(|id| format!("{{\"id\":\"{id}\",\"rows\":[[{{\"text\":\"x\"}}]]}}\n"))
            .collect();
        assert_eq!(parse_corpus(&lines).unwrap().len(), 3);

        let dup = "{\"id\":\"t1\",\"rows\":[[{\"text\":\"x\"}]]}\n{\"id\":\"t1\",\"rows\":[[{\"text\":\"y\"}]]}\n";
        match parse_corpus(dup) {
            Err(TableError::DuplicateId { id, first_line, second_line }) => {
                assert_eq!((id.as_str(), first_line, second_line), ("t1", 1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }

        let bad = "{\"id\":\"t1\",\"rows\":[[{\"text\":\"x\"}]]}\nnot json\n{\"id\":\"t3\"\n";
        match parse_corpus(bad) {
            Err(TableError::Lines(errs)) => {
                assert_eq!(errs.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn small_corpus() -> Corpus {
        ["t1", "t2", "t3"]
            .iter()
            .map(|id| (id.to_string(), plain(id, &[&["x"]])))
            .collect()
    }

    #[test]
    fn instances_carry_grades() {
        let p = Path::new("mem");
        let set = build_instances(
            "q1\tasian countries currency\nq2\tnothing here\n",
            p,
            "q1 0 t1 0\nq1 0 t2 1\nq1 0 t3 2\nq1 0 t9 2\n",
            p,
            &small_corpus(),
        )
        .unwrap();
        assert_eq!(set.instances.len(), 2);
        assert_eq!(
            set.instances[0].candidates,
            vec![("t1".into(), 0), ("t2".into(), 1), ("t3".into(), 2)]
        );
        assert_eq!(set.skipped_unknown_tables, 1);
        assert_eq!(set.empty_queries, vec!["q2".to_string()]);
    }

    #[test]
    fn qrels_with_unknown_query_fail() {
        let p = Path::new("mem");
        let err = build_instances("q1\tx\n", p, "q7 0 t1 1\n", p, &small_corpus()).unwrap_err();
        assert!(matches!(err, TableError::UnknownQuery { ref query_id, line: 1, .. } if query_id == "q7"));
    }

    #[test]
    fn binary_corpus_has_one_relevant_per_query() {
        let p = Path::new("mem");
        let set = build_instances(
            "a\tfirst\nb\tsecond\n",
            p,
            "a 0 t1 1\na 0 t2 0\nb 0 t3 1\nb 0 t1 0\n",
            p,
            &small_corpus(),
        )
        .unwrap();
        assert!(set.instances.iter().all(|i| i.relevant_count() == 1));
    }
}
