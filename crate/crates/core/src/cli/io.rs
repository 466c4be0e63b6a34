//! Field files and tabular output. A field file holds one row per node in
//! lexicographic node order: the node multi-index, then the value (or the
//! row-major tensor entries).

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::TorusGrid;

fn csv_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn header(grid: &TorusGrid, width: usize) -> Vec<String> {
    let mut h: Vec<String> = (0..grid.dim()).map(|a| format!("i{a}")).collect();
    if width == 1 {
        h.push("value".into());
    } else {
        h.extend((0..width).map(|k| format!("v{k}")));
    }
    h
}

/// Writes `values` (`width` entries per node) as a field file.
pub fn write_field_csv(path: &Path, grid: &TorusGrid, values: &[f64], width: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header(grid, width))
        .map_err(|e| csv_error(path, e))?;
    for node in 0..grid.node_count() {
        let mut row: Vec<String> = grid
            .multi_index(node)
            .iter()
            .map(usize::to_string)
            .collect();
        row.extend(
            values[node * width..(node + 1) * width]
                .iter()
                .map(|v| fmt(*v)),
        );
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn read_field(path: &Path, grid: &TorusGrid, width: usize) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let d = grid.dim();
    let mut out = vec![f64::NAN; grid.node_count() * width];
    let mut seen = vec![false; grid.node_count()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let at = |msg: String| csv_error(path, format!("row {}: {msg}", line + 2));
        if rec.len() != d + width {
            return Err(at(format!(
                "expected {} columns, found {}",
                d + width,
                rec.len()
            )));
        }
        let mut idx = Vec::with_capacity(d);
        for a in 0..d {
            let i: usize = rec[a]
                .trim()
                .parse()
                .map_err(|e| at(format!("index {:?}: {e}", &rec[a])))?;
            if i >= grid.sizes()[a] {
                return Err(at(format!(
                    "index {i} outside axis {a} of size {}",
                    grid.sizes()[a]
                )));
            }
            idx.push(i);
        }
        let node = grid.node(&idx);
        if std::mem::replace(&mut seen[node], true) {
            return Err(at(format!("node {idx:?} listed twice")));
        }
        for k in 0..width {
            let s = rec[d + k].trim();
            out[node * width + k] = s.parse().map_err(|e| at(format!("value {s:?}: {e}")))?;
        }
    }
    if let Some(node) = seen.iter().position(|s| !s) {
        return Err(csv_error(
            path,
            format!("node {:?} missing", grid.multi_index(node)),
        ));
    }
    Ok(out)
}

/// Reads a scalar field file; every node must appear once.
pub fn read_field_csv(path: &Path, grid: &TorusGrid, width: usize) -> Result<Vec<f64>> {
    read_field(path, grid, width)
}

/// Reads a tensor field file with `width = d²` entries per node.
pub fn read_tensor_csv(path: &Path, grid: &TorusGrid, width: usize) -> Result<Vec<f64>> {
    read_field(path, grid, width)
}

/// Shortest decimal that reads back to the same `f64`.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// A CSV table written row by row.
pub struct Table {
    path: std::path::PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl Table {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        writer
            .write_record(header)
            .map_err(|e| csv_error(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer
            .write_record(fields)
            .map_err(|e| csv_error(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| csv_error(path, e))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
