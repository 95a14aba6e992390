use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-epoch mean losses, one named column per loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossHistory {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, values: Vec<f64>) {
        assert_eq!(values.len(), self.columns.len());
        self.rows.push(values);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Header `epoch,<columns>` then one line per epoch, epochs counted from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (e, row) in self.rows.iter().enumerate() {
            write!(out, "{}", e + 1).unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Running mean of several loss terms over the batches of one epoch.
#[derive(Debug, Clone)]
pub(crate) struct EpochMeans {
    sums: Vec<f64>,
    count: usize,
}

impl EpochMeans {
    pub(crate) fn new(terms: usize) -> Self {
        Self {
            sums: vec![0.0; terms],
            count: 0,
        }
    }

    pub(crate) fn add(&mut self, values: &[f64]) {
        for (s, v) in self.sums.iter_mut().zip(values) {
            *s += v;
        }
        self.count += 1;
    }

    pub(crate) fn finish(self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.sums.into_iter().map(|s| s / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut h = LossHistory::new(&["mse", "kl"]);
        h.push(vec![1.5, 0.25]);
        h.push(vec![1.0, 0.5]);
        assert_eq!(h.to_csv(), "epoch,mse,kl\n1,1.5,0.25\n2,1,0.5\n");
        assert_eq!(h.column("kl").unwrap(), vec![0.25, 0.5]);
        assert!(h.column("nope").is_none());
    }

    #[test]
    fn epoch_means() {
        let mut m = EpochMeans::new(2);
        m.add(&[1.0, 2.0]);
        m.add(&[3.0, 4.0]);
        assert_eq!(m.finish(), vec![2.0, 3.0]);
        assert_eq!(EpochMeans::new(1).finish(), vec![0.0]);
    }
}
