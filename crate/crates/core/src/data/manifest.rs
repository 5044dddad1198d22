//! JSON-lines dataset manifests: `{"path": "...", "label": 0|1, "group": "..."}`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LtdError, Result};

pub const REAL: u8 = 0;
pub const FAKE: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: PathBuf,
    pub label: u8,
    #[serde(default)]
    pub group: String,
}

#[derive(Deserialize)]
struct RawRecord {
    path: PathBuf,
    label: i64,
    #[serde(default)]
    group: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<Record>,
    /// Directory relative paths are resolved against.
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<Record>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        if records.is_empty() {
            return Err(LtdError::Validation("empty manifest".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if r.label > 1 {
                return Err(LtdError::Validation(format!(
                    "label {} for {} is not binary",
                    r.label,
                    r.path.display()
                )));
            }
            if !seen.insert(&r.path) {
                return Err(LtdError::Validation(format!("duplicate path {}", r.path.display())));
            }
        }
        Ok(DatasetManifest {
            records,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LtdError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(line).map_err(|e| LtdError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if raw.label != 0 && raw.label != 1 {
                return Err(LtdError::Validation(format!(
                    "line {}: label {} is not binary",
                    i + 1,
                    raw.label
                )));
            }
            records.push(Record {
                path: raw.path,
                label: raw.label as u8,
                group: raw.group,
            });
        }
        Self::new(records, base_dir)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::to_string(r).expect("record serializes");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| LtdError::io(path, e))
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// (real, fake) counts.
    pub fn label_counts(&self) -> (usize, usize) {
        let fake = self.records.iter().filter(|r| r.label == FAKE).count();
        (self.records.len() - fake, fake)
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }
}
