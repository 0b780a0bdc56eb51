//! Stage metrics and their CSV form.
//!
//! CSVs hold only values that are a function of (config, seed), so reruns are
//! byte-identical. Wall-clock durations go to `summary.json` instead.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub fingerprint: String,
    /// `(name, value)` in insertion order.
    pub scalars: Vec<(String, f64)>,
    /// `(name, values)`; values are indexed from 0.
    pub series: Vec<(String, Vec<f64>)>,
    pub duration_secs: f64,
}

pub const CSV_HEADER: &str = "fingerprint,stage,metric,index,value";

impl MetricsRecord {
    pub fn new(stage: &str, fingerprint: &str) -> Self {
        Self {
            stage: stage.to_string(),
            fingerprint: fingerprint.to_string(),
            scalars: Vec::new(),
            series: Vec::new(),
            duration_secs: 0.0,
        }
    }

    pub fn scalar(&mut self, name: impl Into<String>, value: f64) {
        self.scalars.push((name.into(), value));
    }

    pub fn push_series(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.series.push((name.into(), values));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (name, v) in &self.scalars {
            let _ = writeln!(out, "{},{},{},,{}", self.fingerprint, self.stage, name, fmt_value(*v));
        }
        for (name, values) in &self.series {
            for (i, v) in values.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{},{}", self.fingerprint, self.stage, name, i, fmt_value(*v));
            }
        }
        out
    }

    pub fn from_csv(text: &str, origin: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: origin.to_string(),
            reason,
        };
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(bad("missing metrics header".into()));
        }
        let mut rec: Option<MetricsRecord> = None;
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            let [fp, stage, name, index, value] = cols[..] else {
                return Err(bad(format!("line {}: expected 5 columns", i + 2)));
            };
            let value: f64 = value.parse().map_err(|_| bad(format!("line {}: bad value {value:?}", i + 2)))?;
            let r = rec.get_or_insert_with(|| MetricsRecord::new(stage, fp));
            if index.is_empty() {
                r.scalar(name, value);
            } else {
                match r.series.last_mut() {
                    Some((n, vals)) if n == name => vals.push(value),
                    _ => r.push_series(name, vec![value]),
                }
            }
        }
        rec.ok_or_else(|| bad("no metric rows".into()))
    }

    pub fn write(&self, metrics_dir: &Path) -> Result<()> {
        fs::create_dir_all(metrics_dir)?;
        fs::write(metrics_dir.join(format!("{}.csv", self.stage)), self.to_csv())?;
        Ok(())
    }
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt_value(v: f64) -> String {
    format!("{v:?}")
}

/// Writes a plain CSV table with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut r = MetricsRecord::new("evaluate", "ab12");
        r.scalar("accuracy", 0.1 + 0.2);
        r.scalar("count", 3.0);
        r.push_series("loss", vec![1.5, 1e-17, -0.0]);
        let csv = r.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.contains("ab12,evaluate,accuracy,,0.30000000000000004\n"));
        let back = MetricsRecord::from_csv(&csv, "x").unwrap();
        assert_eq!(back.scalars, r.scalars);
        assert_eq!(back.series, r.series);
        assert!(MetricsRecord::from_csv("nope\n", "x").is_err());
    }
}
