//! Static word embeddings and text averaging.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("embedding file has no vectors")]
    Empty,
}

/// Lowercases and splits on every non-alphanumeric character. Digits are
/// kept, so numbers become tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// What happens to tokens missing from the vocabulary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum OovPolicy {
    /// OOV tokens contribute nothing to the average.
    #[default]
    Skip,
}

/// Encodes free text into a fixed-size vector.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    vectors: Array2<f64>,
    pub oov: OovPolicy,
}

impl EmbeddingTable {
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        let mut index = HashMap::new();
        let mut tokens = Vec::new();
        let mut flat = Vec::new();
        for (token, vector) in pairs {
            assert_eq!(vector.len(), dim, "vector for {token:?} has wrong dimension");
            if index.contains_key(&token) {
                continue;
            }
            index.insert(token.clone(), tokens.len());
            tokens.push(token);
            flat.extend(vector);
        }
        let vectors = Array2::from_shape_vec((tokens.len(), dim), flat).expect("sized rows");
        EmbeddingTable {
            index,
            tokens,
            vectors,
            oov: OovPolicy::Skip,
        }
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses the `token v1 ... vd` text format. An optional first line of
    /// two integers (`vocab_size dim`) is treated as a header. Later
    /// duplicates of a token are ignored.
    pub fn parse(text: &str) -> Result<Self, EmbeddingError> {
        let mut lines = text.lines().enumerate().peekable();
        let mut declared_dim = None;
        if let Some((_, first)) = lines.peek() {
            let fields: Vec<&str> = first.split_whitespace().collect();
            if fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                declared_dim = Some(fields[1].parse::<usize>().unwrap());
                lines.next();
            }
        }
        let mut dim = declared_dim;
        let mut pairs = Vec::new();
        for (i, line) in lines {
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let vector: Vec<f64> = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| EmbeddingError::Format {
                        line: i + 1,
                        message: format!("{f:?} is not a number"),
                    })
                })
                .collect::<Result<_, _>>()?;
            match dim {
                None => dim = Some(vector.len()),
                Some(d) if d != vector.len() => {
                    return Err(EmbeddingError::Format {
                        line: i + 1,
                        message: format!("expected {d} values, found {}", vector.len()),
                    })
                }
                _ => {}
            }
            pairs.push((token.to_string(), vector));
        }
        let dim = dim.filter(|d| *d > 0).ok_or(EmbeddingError::Empty)?;
        Ok(Self::from_pairs(dim, pairs))
    }

    /// Writes the table with a `vocab_size dim` header.
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{} {}", self.tokens.len(), self.dim())?;
        for (token, row) in self.tokens.iter().zip(self.vectors.rows()) {
            write!(out, "{token}")?;
            for v in row {
                write!(out, " {v:?}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vector(&self, token: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index.get(token).map(|&i| self.vectors.row(i))
    }

    /// Average of the in-vocabulary token vectors of `text`; the zero vector
    /// when no token is known.
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim()];
        let mut count = 0usize;
        for token in tokenize(text) {
            if let Some(v) = self.vector(&token) {
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
                count += 1;
            }
        }
        if count > 0 {
            for s in &mut sum {
                *s /= count as f64;
            }
        }
        sum
    }
}

impl TextEncoder for EmbeddingTable {
    fn dim(&self) -> usize {
        EmbeddingTable::dim(self)
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        self.embed_text(text)
    }
}
