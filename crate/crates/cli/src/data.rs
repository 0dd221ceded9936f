//! Numeric columns read from a headed CSV file.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{CliError, CliResult};

/// Selected columns of a CSV file, stored column-major.
#[derive(Debug)]
pub struct Table {
    columns: HashMap<String, Vec<f64>>,
    pub n_rows: usize,
}

impl Table {
    /// Reads the named columns as numbers. Rows are numbered from 1 after the
    /// header in error messages. A zero-byte file reads as zero rows.
    pub fn read(path: &Path, names: &[&str]) -> CliResult<Table> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| CliError::io(path, e))?;
        let headers = reader.headers().map_err(|e| csv_data_error(path, e))?.clone();
        if headers.is_empty() {
            // A zero-byte file holds no rows of any column.
            return Ok(Table {
                columns: names.iter().map(|n| (n.to_string(), Vec::new())).collect(),
                n_rows: 0,
            });
        }
        let mut index = Vec::with_capacity(names.len());
        for name in names {
            let pos = headers.iter().position(|h| h.trim() == *name).ok_or_else(|| {
                CliError::Data(format!("{}: column '{name}' not found in the header", path.display()))
            })?;
            index.push(pos);
        }
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        let mut n_rows = 0;
        for (r, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_data_error(path, e))?;
            let row = r + 1;
            for (k, &pos) in index.iter().enumerate() {
                let raw = record.get(pos).unwrap_or("").trim();
                let value: f64 = raw.parse().map_err(|_| {
                    CliError::Data(format!(
                        "{}: row {row}, column '{}': cannot read '{raw}' as a number",
                        path.display(),
                        names[k]
                    ))
                })?;
                if !value.is_finite() {
                    return Err(CliError::Data(format!(
                        "{}: row {row}, column '{}': value is not finite",
                        path.display(),
                        names[k]
                    )));
                }
                columns[k].push(value);
            }
            n_rows += 1;
        }
        Ok(Table {
            columns: names.iter().map(|n| n.to_string()).zip(columns).collect(),
            n_rows,
        })
    }

    pub fn column(&self, name: &str) -> &[f64] {
        &self.columns[name]
    }
}

fn csv_data_error(path: &Path, e: csv::Error) -> CliError {
    let location = e
        .position()
        .map(|p| format!(" (line {}, record {})", p.line(), p.record()))
        .unwrap_or_default();
    CliError::Data(format!("{}{location}: {e}", path.display()))
}
