use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "nan".into())
}

pub fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// A CSV table preceded by `# ` comment lines.
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write(&self, dir: &Path, name: &str, header: &[String]) -> Result<PathBuf, CliError> {
        let mut buf = Vec::new();
        for line in header {
            buf.extend_from_slice(b"# ");
            buf.extend_from_slice(line.as_bytes());
            buf.push(b'\n');
        }
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.columns).map_err(CliError::Csv)?;
            for r in &self.rows {
                w.write_record(r).map_err(CliError::Csv)?;
            }
            w.flush()?;
        }
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        fs::write(&path, buf)?;
        Ok(path)
    }
}
