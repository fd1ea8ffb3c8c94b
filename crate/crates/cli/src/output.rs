//! CSV writers and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Row-oriented CSV text. Floats use the shortest round-trip form.
pub struct Csv {
    text: String,
    width: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            text: format!("{}\n", header.join(",")),
            width: header.len(),
        }
    }

    pub fn row(&mut self, cells: &[Cell]) {
        debug_assert_eq!(cells.len(), self.width);
        let line: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    pub fn key_values<K: Display, V: Into<Cell>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        let mut csv = Self::new(&["key", "value"]);
        for (k, v) in pairs {
            csv.row(&[Cell::Text(k.to_string()), v.into()]);
        }
        csv
    }
}

#[derive(Clone, Debug)]
pub enum Cell {
    Int(u64),
    Num(f64),
    Text(String),
    Empty,
}

impl Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Num(v) => write!(f, "{v:e}"),
            Cell::Text(s) => write!(f, "{s}"),
            Cell::Empty => Ok(()),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

/// Files and statistics written by one phase.
pub struct PhaseRecord {
    root: PathBuf,
    phase: &'static str,
    files: Vec<Value>,
    pub stats: Map<String, Value>,
}

impl PhaseRecord {
    pub fn new(root: &Path, phase: &'static str) -> Result<Self, CliError> {
        let dir = root.join(phase);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            phase,
            files: Vec::new(),
            stats: Map::new(),
        })
    }

    pub fn write(&mut self, name: &str, csv: Csv) -> Result<(), CliError> {
        let rel = format!("{}/{name}", self.phase);
        let path = self.root.join(&rel);
        let bytes = csv.text.into_bytes();
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| CliError::io(&path, e))?;
        self.files.push(json!({
            "path": rel,
            "bytes": bytes.len(),
            "sha256": sha256_hex(&bytes),
        }));
        Ok(())
    }

    pub fn stat(&mut self, key: &str, value: impl Into<Value>) {
        self.stats.insert(key.to_string(), value.into());
    }

    fn into_value(self, wall_seconds: f64) -> Value {
        json!({
            "wall_seconds": wall_seconds,
            "files": self.files,
            "stats": self.stats,
        })
    }
}

/// Everything recorded about a run. Phases from an earlier invocation with
/// the same configuration are kept, so `oed` followed by `uq` yields one
/// manifest.
pub struct Manifest {
    header: Map<String, Value>,
    phases: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn open(root: &Path, header: Map<String, Value>) -> Self {
        let mut phases = BTreeMap::new();
        let previous = fs::read_to_string(root.join(MANIFEST))
            .ok()
            .and_then(|t| serde_json::from_str::<Value>(&t).ok());
        if let Some(Value::Object(old)) = previous {
            let same = ["config", "exact_mode"].iter().all(|k| old.get(*k) == header.get(*k));
            if same {
                if let Some(Value::Object(p)) = old.get("phases") {
                    phases.extend(p.iter().map(|(k, v)| (k.clone(), v.clone())));
                }
            }
        }
        Self { header, phases }
    }

    pub fn record(&mut self, phase: PhaseRecord, wall_seconds: f64) {
        let name = phase.phase.to_string();
        self.phases.insert(name, phase.into_value(wall_seconds));
    }

    pub fn save(&self, root: &Path) -> Result<(), CliError> {
        let mut doc = self.header.clone();
        doc.insert("phases".into(), Value::Object(self.phases.clone().into_iter().collect()));
        let text = serde_json::to_string_pretty(&Value::Object(doc)).expect("manifest serializes");
        let path = root.join(MANIFEST);
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}
