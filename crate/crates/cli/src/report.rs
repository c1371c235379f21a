//! Byte-stable JSON and CSV emission.
//!
//! Object keys are sorted, floats are written as `%.12e`, lines end in LF.
//! Values stored in a [`RunSummary`] are pre-rounded to that precision, so
//! parsing an emitted summary gives back the identical struct.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub scenario: String,
    pub config_hash: String,
    pub exit_code: i32,
    /// Headline scalars; absent entries were not computed.
    pub headline: BTreeMap<String, f64>,
    /// Integer and boolean diagnostics.
    pub counters: BTreeMap<String, i64>,
    pub warnings: Vec<String>,
    pub artifacts: Vec<Artifact>,
    pub seed: Option<u64>,
}

impl RunSummary {
    pub fn new(scenario: &str, config_hash: String, seed: Option<u64>) -> Self {
        Self {
            scenario: scenario.to_string(),
            config_hash,
            exit_code: 0,
            headline: BTreeMap::new(),
            counters: BTreeMap::new(),
            warnings: Vec::new(),
            artifacts: Vec::new(),
            seed,
        }
    }

    /// Records a scalar at the precision it will be written with. Non-finite
    /// values go to the warnings instead, since JSON cannot carry them.
    pub fn set(&mut self, key: &str, value: f64) {
        if value.is_finite() {
            self.headline.insert(key.to_string(), round12(value));
        } else {
            self.warnings.push(format!("{key} is not finite ({value})"));
        }
    }

    pub fn count(&mut self, key: &str, value: i64) {
        self.counters.insert(key.to_string(), value);
    }
}

/// The f64 nearest to `x` written with 13 significant digits.
pub fn round12(x: f64) -> f64 {
    fmt_float(x).parse().unwrap_or(x)
}

pub fn fmt_float(x: f64) -> String {
    format!("{x:.12e}")
}

/// Canonical JSON text of any value, newline-terminated.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value, 0);
    out.push('\n');
    out
}

fn write_value(out: &mut String, value: &Value, depth: usize) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                write!(out, "{i}").unwrap();
            } else if let Some(u) = n.as_u64() {
                write!(out, "{u}").unwrap();
            } else {
                out.push_str(&fmt_float(n.as_f64().unwrap_or(f64::NAN)));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                newline(out, depth + 1);
                write_value(out, item, depth + 1);
            }
            newline(out, depth);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                newline(out, depth + 1);
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_value(out, &map[*k], depth + 1);
            }
            newline(out, depth);
            out.push('}');
        }
    }
}

fn newline(out: &mut String, depth: usize) {
    out.push('\n');
    for _ in 0..depth {
        out.push_str("  ");
    }
}

pub fn summary_json(summary: &RunSummary) -> String {
    canonical_json(&serde_json::to_value(summary).expect("summary serializes"))
}

pub fn parse_summary(text: &str) -> Result<RunSummary, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A CSV table kept in memory until written.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Bool(bool),
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Float(x) => fmt_float(*x),
                    Cell::Int(i) => i.to_string(),
                    Cell::Bool(b) => b.to_string(),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Writes the tables, records their checksums in the summary, then writes
/// the summary itself. Tables are written in the given order.
pub fn emit_report(
    dir: &Path,
    summary: &mut RunSummary,
    tables: &[(String, Table)],
) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    summary.artifacts.clear();
    for (name, table) in tables {
        let text = table.to_csv();
        write_file(&dir.join(name), text.as_bytes())?;
        summary.artifacts.push(Artifact {
            file: name.clone(),
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let path = dir.join(SUMMARY_FILE);
    write_file(&path, summary_json(summary).as_bytes())?;
    Ok(path)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
