//! Plain-text tables for simulation outputs.
//!
//! Every data product is a rectangular table of floats with one header row
//! naming each column and its unit (for example `f_hz` or `G_per_s`). Tables
//! serialize to CSV or to a small JSON object; both formats print floats with
//! Rust's shortest round-trip representation, so a rerun with identical
//! inputs produces byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rectangular table of f64 columns with unit-bearing header names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Column index by header name.
    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::invalid(format!("table has no column named {name}")))
    }

    /// Extract one column by name.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Table> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty table file"))?;
        let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        if columns.iter().any(|c| c.is_empty()) {
            return Err(Error::invalid("table header has an empty column name"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| {
                        Error::invalid(format!("row {}: {:?} is not a number", i + 2, s.trim()))
                    })
                })
                .collect::<Result<_>>()?;
            if row.len() != columns.len() {
                return Err(Error::invalid(format!(
                    "row {} has {} fields, header has {}",
                    i + 2,
                    row.len(),
                    columns.len()
                )));
            }
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    pub fn to_json(&self) -> String {
        // serde_json prints f64 with the same shortest round-trip rule as
        // the CSV path, keeping both formats rerun-stable.
        serde_json::to_string_pretty(self).expect("table serialization cannot fail") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Table> {
        let t: Table = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("malformed table JSON: {e}")))?;
        if t.rows.iter().any(|r| r.len() != t.columns.len()) {
            return Err(Error::invalid("table JSON has ragged rows"));
        }
        Ok(t)
    }

    pub fn write(&self, path: &Path, format: TableFormat) -> Result<()> {
        let text = match format {
            TableFormat::Csv => self.to_csv(),
            TableFormat::Json => self.to_json(),
        };
        fs::write(path, text)
            .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
    }

    /// Read a table, picking the parser from the file extension
    /// (`.json` is JSON, anything else CSV).
    pub fn read(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Table::from_json(&text)
        } else {
            Table::from_csv(&text)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Json,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Csv => "csv",
            TableFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            other => Err(Error::invalid(format!(
                "unknown format {other:?}; expected csv or json"
            ))),
        }
    }
}

/// Standard column set for a sampled spectrum.
pub fn spectrum_table(freqs_hz: &[f64], g_per_s: &[f64], sigma_per_s: Option<&[f64]>) -> Table {
    let mut t = Table::new(&["f_hz", "G_per_s", "sigma_per_s"]);
    for (i, (&f, &g)) in freqs_hz.iter().zip(g_per_s).enumerate() {
        let s = sigma_per_s.map(|s| s[i]).unwrap_or(0.0);
        t.push(vec![f, g, s]);
    }
    t
}

/// Standard column set for a filter function.
pub fn filter_table(freqs_hz: &[f64], filter_s2: &[f64]) -> Table {
    let mut t = Table::new(&["f_hz", "F_s2"]);
    for (&f, &v) in freqs_hz.iter().zip(filter_s2) {
        t.push(vec![f, v]);
    }
    t
}

/// Standard column set for a coherence curve.
pub fn coherence_table(times_s: &[f64], coherence: &[f64], stderr: Option<&[f64]>) -> Table {
    let mut t = Table::new(&["t_s", "coherence", "stderr"]);
    for (i, (&time, &c)) in times_s.iter().zip(coherence).enumerate() {
        let s = stderr.map(|s| s[i]).unwrap_or(0.0);
        t.push(vec![time, c, s]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_preserves_exact_floats() {
        let mut t = Table::new(&["f_hz", "G_per_s"]);
        t.push(vec![0.1 + 0.2, 1.0e-17]);
        t.push(vec![f64::MIN_POSITIVE, 12345.678901234567]);
        let back = Table::from_csv(&t.to_csv()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn json_round_trip_preserves_exact_floats() {
        let mut t = Table::new(&["t_s", "coherence", "stderr"]);
        t.push(vec![0.25, 0.9999999999999999, 1e-6]);
        let back = Table::from_json(&t.to_json()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn malformed_tables_are_rejected() {
        assert!(Table::from_csv("").is_err());
        assert!(Table::from_csv("a,b\n1.0\n").is_err());
        assert!(Table::from_csv("a,b\n1.0,zebra\n").is_err());
        let ragged = r#"{"columns":["a","b"],"rows":[[1.0]]}"#;
        assert!(Table::from_json(ragged).is_err());
    }

    #[test]
    fn column_lookup_by_name() {
        let t = spectrum_table(&[1.0, 2.0], &[3.0, 4.0], None);
        assert_eq!(t.values("f_hz").unwrap(), vec![1.0, 2.0]);
        assert_eq!(t.values("G_per_s").unwrap(), vec![3.0, 4.0]);
        assert!(t.values("missing").is_err());
    }
}
