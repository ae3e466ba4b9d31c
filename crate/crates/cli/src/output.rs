//! Run directories: tables in CSV or JSON, JSON reports and the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use dualenkf_core::DMatrix;
use serde::Serialize;

use crate::config::{ExperimentConfig, OutputFormat};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.toml";

/// Build identifier recorded in manifests.
pub fn build_id() -> String {
    format!(
        "dualenkf {} ({})",
        env!("CARGO_PKG_VERSION"),
        env!("DUALENKF_BUILD_ID")
    )
}

/// One table cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Shortest round-trip decimal, switching to exponent form outside
/// `[1e-4, 1e15)`.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

impl Cell {
    fn to_csv(&self) -> String {
        match self {
            Cell::Num(v) => format_float(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            Cell::Num(v) => serde_json::Number::from_f64(*v)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            Cell::Int(v) => serde_json::Value::from(*v),
            Cell::Text(s) => serde_json::Value::from(s.clone()),
            Cell::Empty => serde_json::Value::Null,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Column names `{prefix}_{i}{j}` (1-based, row-major) for a `rows x cols` matrix.
pub fn matrix_columns(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 1..=rows {
        for j in 1..=cols {
            if rows > 9 || cols > 9 {
                out.push(format!("{prefix}_{i}_{j}"));
            } else {
                out.push(format!("{prefix}_{i}{j}"));
            }
        }
    }
    out
}

pub fn vector_columns(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

/// Row-major entries of `m` as cells.
pub fn matrix_cells(m: &DMatrix<f64>) -> Vec<Cell> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(Cell::Num(m[(i, j)]));
        }
    }
    out
}

/// Row-major nested vectors, for JSON reports.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub struct RunDir {
    dir: PathBuf,
    format: OutputFormat,
    written: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(dir: &Path, format: OutputFormat) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            format,
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Table in the configured format as `{name}.csv` or `{name}.json`.
    pub fn table(&mut self, name: &str, table: &Table) -> Result<PathBuf, CliError> {
        match self.format {
            OutputFormat::Csv => {
                let path = self.dir.join(format!("{name}.csv"));
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(&table.columns)?;
                for row in &table.rows {
                    w.write_record(row.iter().map(Cell::to_csv))?;
                }
                w.flush()?;
                self.written.push(path.clone());
                Ok(path)
            }
            OutputFormat::Json => {
                let rows: Vec<serde_json::Value> = table
                    .rows
                    .iter()
                    .map(|row| {
                        let obj: serde_json::Map<String, serde_json::Value> = table
                            .columns
                            .iter()
                            .cloned()
                            .zip(row.iter().map(Cell::to_json))
                            .collect();
                        serde_json::Value::Object(obj)
                    })
                    .collect();
                self.json(name, &rows)
            }
        }
    }

    /// Flat records as CSV rows or a JSON array, per the configured format.
    pub fn records<T: Serialize>(
        &mut self,
        name: &str,
        records: &[T],
    ) -> Result<PathBuf, CliError> {
        match self.format {
            OutputFormat::Json => self.json(name, records),
            OutputFormat::Csv => {
                let path = self.dir.join(format!("{name}.csv"));
                let mut w = csv::Writer::from_path(&path)?;
                for r in records {
                    w.serialize(r)?;
                }
                w.flush()?;
                self.written.push(path.clone());
                Ok(path)
            }
        }
    }

    /// Serializable value as pretty JSON in `{name}.json`.
    pub fn json<T: Serialize + ?Sized>(
        &mut self,
        name: &str,
        value: &T,
    ) -> Result<PathBuf, CliError> {
        let path = self.dir.join(format!("{name}.json"));
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text)?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Resolved configuration plus provenance, loadable with `--config`.
    pub fn manifest(&mut self, cfg: &ExperimentConfig, command: &str) -> Result<PathBuf, CliError> {
        let mut cfg = cfg.clone();
        cfg.manifest.command = command.to_string();
        cfg.manifest.build = build_id();
        let path = self.dir.join(MANIFEST);
        fs::write(&path, cfg.to_toml_string()?)?;
        self.written.push(path.clone());
        Ok(path)
    }
}
