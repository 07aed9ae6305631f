//! CSV and JSON outputs with provenance headers, written atomically.

use std::path::{Path, PathBuf};

use anyhow::Context;
use samlab_core::io::{fmt_f64, to_json_string, write_atomic};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => fmt_f64(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(if v { "true" } else { "false" }.to_owned())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    /// Renders with `#config-hash=` and `#seed=` comment lines before the header.
    pub fn render(&self, config_hash: &str, seeds: &str) -> String {
        let mut out = format!("#config-hash={config_hash}\n#seed={seeds}\n{}\n", self.header.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(Cell::render).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Seed label for CSV provenance: a single seed or a `;`-separated list.
pub fn seed_label(seeds: &[u64]) -> String {
    seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
}

/// Writes files under one directory and remembers what it wrote.
pub struct OutputDir {
    root: PathBuf,
    config_hash: String,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn new(root: impl Into<PathBuf>, config_hash: impl Into<String>) -> Self {
        OutputDir {
            root: root.into(),
            config_hash: config_hash.into(),
            written: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn csv(&mut self, name: &str, table: &Table, seeds: &[u64]) -> anyhow::Result<PathBuf> {
        let text = table.render(&self.config_hash, &seed_label(seeds));
        self.write(name, text.as_bytes())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut text = to_json_string(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn text(&mut self, name: &str, text: &str) -> anyhow::Result<PathBuf> {
        self.write(name, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["method", "rho", "steps"]);
        t.push(vec!["gd".into(), 0.1.into(), 5u64.into()]);
        let s = t.render("abc", &seed_label(&[1, 2]));
        assert_eq!(
            s,
            "#config-hash=abc\n#seed=1;2\nmethod,rho,steps\ngd,1.0000000000000001e-1,5\n"
        );
    }

    #[test]
    fn float_cells_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23] {
            let s = Cell::Float(v).render();
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }
}
