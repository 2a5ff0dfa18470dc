//! Artifacts are built fully in memory and only written once the whole
//! command has succeeded.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

/// Revision of the artifact layout; bumped whenever columns change.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Table cell. Missing values render as an empty CSV field or JSON `null`.
#[derive(Debug, Clone)]
pub enum Cell {
    Num(Option<f64>),
    Int(usize),
    Text(String),
    Flag(bool),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(Some(v))
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
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

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Flag(v)
    }
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Num(Some(v)) if *v != 0.0 && (v.abs() < 1e-4 || v.abs() >= 1e15) => format!("{v:e}"),
            Cell::Num(Some(v)) => v.to_string(),
            Cell::Num(None) => String::new(),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
            Cell::Flag(b) => u8::from(*b).to_string(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(Some(v)) if v.is_finite() => json!(v),
            Cell::Num(_) => Value::Null,
            Cell::Int(v) => json!(v),
            Cell::Text(s) => json!(s),
            Cell::Flag(b) => json!(b),
        }
    }
}

pub struct Table {
    pub name: &'static str,
    pub columns: &'static [&'static str],
    pub rows: Vec<Vec<Cell>>,
}

/// Echo of the library version, command and fully resolved configuration.
#[derive(Serialize)]
pub struct Header<'a> {
    pub trapscape_version: &'static str,
    pub format_version: u32,
    pub command: &'a str,
    pub config: &'a RunConfig,
}

pub struct Artifact {
    pub file: PathBuf,
    pub contents: String,
}

/// Collects a command's outputs under a common header.
pub struct Outputs<'a> {
    header: Header<'a>,
    format: Format,
    prefix: PathBuf,
    pub artifacts: Vec<Artifact>,
}

impl<'a> Outputs<'a> {
    pub fn new(command: &'a str, config: &'a RunConfig, format: Format, prefix: impl Into<PathBuf>) -> Self {
        Outputs {
            header: Header {
                trapscape_version: trapscape::VERSION,
                format_version: FORMAT_VERSION,
                command,
                config,
            },
            format,
            prefix: prefix.into(),
            artifacts: Vec::new(),
        }
    }

    /// JSON report with the header as its first field.
    pub fn report(&mut self, name: &str, data: impl Serialize) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Report<'h, T> {
            header: &'h Header<'h>,
            data: T,
        }
        let text = serde_json::to_string_pretty(&Report {
            header: &self.header,
            data,
        })
        .map_err(|e| CliError::Io(format!("cannot serialize {name}: {e}")))?;
        self.push(format!("{name}.json"), text + "\n");
        Ok(())
    }

    /// Table as CSV (header on a leading `#` line) or as a JSON list of rows.
    pub fn table(&mut self, table: Table) -> Result<(), CliError> {
        match self.format {
            Format::Csv => {
                let header = serde_json::to_string(&self.header)
                    .map_err(|e| CliError::Io(format!("cannot serialize header: {e}")))?;
                let mut s = format!("# {header}\n{}\n", table.columns.join(","));
                for row in &table.rows {
                    let line: Vec<String> = row.iter().map(Cell::csv).collect();
                    s.push_str(&line.join(","));
                    s.push('\n');
                }
                self.push(format!("{}.csv", table.name), s);
                Ok(())
            }
            Format::Json => {
                let rows: Vec<Value> = table
                    .rows
                    .iter()
                    .map(|r| {
                        Value::Object(
                            table
                                .columns
                                .iter()
                                .zip(r)
                                .map(|(c, v)| (c.to_string(), v.json()))
                                .collect(),
                        )
                    })
                    .collect();
                self.report(table.name, json!({ "columns": table.columns, "rows": rows }))
            }
        }
    }

    fn push(&mut self, file: String, contents: String) {
        self.artifacts.push(Artifact {
            file: self.prefix.join(file),
            contents,
        });
    }
}

/// Writes every artifact via a temporary sibling and a rename.
pub fn write_all(out: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::with_capacity(artifacts.len());
    for a in artifacts {
        let path = out.join(&a.file);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create '{}': {e}", dir.display())))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &a.contents).map_err(|e| CliError::Io(format!("cannot write '{}': {e}", tmp.display())))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::Io(format!("cannot write '{}': {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}
