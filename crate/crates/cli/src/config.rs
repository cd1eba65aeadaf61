//! Flat `key = value` experiment files. Command-line flags override them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Keys accepted in a config file, with `-` and `_` interchangeable.
pub const KEYS: &[&str] = &[
    "corpus",
    "queries",
    "qrels",
    "embeddings",
    "checkpoint",
    "out",
    "objective",
    "epochs",
    "batch_size",
    "lr",
    "warmup",
    "folds",
    "seed",
    "workers",
    "dropout",
    "negatives",
    "pretrain",
    "rank_scope",
    "layers",
    "heads",
    "gain",
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    /// Directory relative paths in the file are resolved against.
    base: PathBuf,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl ConfigFile {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("config line {}: expected key = value", i + 1)))?;
            let key = normalize(key);
            if !KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!("config line {}: unknown key {key:?}", i + 1)));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(ConfigFile {
            values,
            base: base.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(&normalize(key)).map(String::as_str)
    }

    /// The flag value if given, else the parsed file value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Config(format!("config key {key}: {v:?}: {e}")))
            })
            .transpose()
    }

    /// Like [`ConfigFile::pick`] for paths; file values are relative to the
    /// config file's directory.
    pub fn path(&self, flag: Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.or_else(|| self.get(key).map(|v| self.base.join(v)))
    }
}
