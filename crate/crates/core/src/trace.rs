//! Training traces as newline-delimited JSON records.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub name: String,
    pub value: f64,
}

/// Append-only list of loss records for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: usize, name: &str, value: f64) {
        self.records.push(TraceRecord {
            step,
            name: name.to_string(),
            value,
        });
    }

    /// Record `value` and fail if it is not finite.
    pub fn push_checked(&mut self, step: usize, name: &str, value: f64) -> Result<()> {
        self.push(step, name, value);
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                name: name.to_string(),
                step,
                trace: self.tail(32),
            })
        }
    }

    pub fn tail(&self, n: usize) -> Vec<TraceRecord> {
        let start = self.records.len().saturating_sub(n);
        self.records[start..].to_vec()
    }

    pub fn values(&self, name: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.name == name)
            .map(|r| r.value)
            .collect()
    }

    pub fn extend(&mut self, other: &Trace) {
        self.records.extend(other.records.iter().cloned());
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_ndjson().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn parse_ndjson(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }
}
