//! Append-only CSV metric log keyed by training step.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Rows of string cells under a fixed header; the first column is the step
/// and must strictly increase. Empty cells mean "not measured this step".
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricLog {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// Formats a float with Rust's shortest round-trip representation.
pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

impl MetricLog {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        MetricLog {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Contract(format!(
                "row of {} cells for {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        let step: usize = row[0]
            .parse()
            .map_err(|_| Error::Contract(format!("bad step cell {:?}", row[0])))?;
        if let Some(last) = self.rows.last() {
            if step <= last[0].parse::<usize>().unwrap() {
                return Err(Error::Contract(format!(
                    "step {step} does not follow {}",
                    last[0]
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Contract(format!("no column {name}")))
    }

    /// Values of a numeric column; empty cells become `None`.
    pub fn column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let i = self.index(name)?;
        self.rows
            .iter()
            .map(|r| {
                if r[i].is_empty() {
                    Ok(None)
                } else {
                    r[i].parse()
                        .map(Some)
                        .map_err(|_| Error::Format(format!("non-numeric {name} cell {:?}", r[i])))
                }
            })
            .collect()
    }

    /// `(step, value)` for every row where `name` is filled in.
    pub fn series(&self, name: &str) -> Result<Vec<(f64, f64)>> {
        let steps = self.column(&self.columns[0].clone())?;
        Ok(steps
            .into_iter()
            .zip(self.column(name)?)
            .filter_map(|(s, v)| Some((s?, v?)))
            .collect())
    }

    /// Last filled-in value of a numeric column.
    pub fn last(&self, name: &str) -> Result<Option<f64>> {
        Ok(self.column(name)?.into_iter().flatten().last())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty metrics file".into()))?;
        let mut log = MetricLog::new(header.split(','));
        for line in lines {
            log.push(line.split(',').map(str::to_string).collect())?;
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
