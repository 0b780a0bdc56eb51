//! Comparison table and plot-ready series rebuilt from the metrics files.

use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{fmt_value, write_table, MetricsRecord};
use crate::error::Result;

/// Method rows of the comparison table, in this order when present.
pub const METHOD_ORDER: [&str; 4] = ["baseline", "random", "kmeans", "crc"];

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub fingerprint: Option<String>,
    /// `(method, accuracy)` in [`METHOD_ORDER`].
    pub comparison: Vec<(String, f64)>,
    pub table: String,
}

fn read(metrics: &Path, stage: &str) -> Result<Option<MetricsRecord>> {
    let path = metrics.join(format!("{stage}.csv"));
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    MetricsRecord::from_csv(&text, &path.display().to_string()).map(Some)
}

/// Parses `prefix.c<m>.j<j>`-style names into their numeric parts.
fn indices(name: &str, prefix: &str) -> Option<Vec<usize>> {
    name.strip_prefix(prefix)?
        .split('.')
        .filter(|s| !s.is_empty())
        .map(|part| part.get(1..)?.parse().ok())
        .collect()
}

/// Reads `out/metrics/*.csv` and writes `out/figures/*.csv`. Missing stages are skipped.
pub fn report(out: &Path) -> Result<Report> {
    let metrics = out.join("metrics");
    let figures = out.join("figures");
    let mut fingerprint = None;

    if let Some(rec) = read(&metrics, "privacy_score")? {
        let mut rows: Vec<(usize, usize, f64)> = rec
            .scalars
            .iter()
            .filter_map(|(n, v)| match indices(n, "score.")?.as_slice() {
                [m, j] => Some((*m, *j, *v)),
                _ => None,
            })
            .collect();
        rows.sort_by_key(|r| (r.0, r.1));
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|(m, j, s)| vec![m.to_string(), j.to_string(), fmt_value(*s)])
            .collect();
        write_table(&figures.join("privacy_scores.csv"), &["client", "depth", "score"], &table)?;
        fingerprint.get_or_insert(rec.fingerprint);
    }

    if let Some(rec) = read(&metrics, "validate_delta")? {
        let mut rows: Vec<(usize, f64, f64)> = rec
            .scalars
            .iter()
            .filter_map(|(n, v)| {
                let d = n.strip_prefix("accuracy.d")?.parse().ok()?;
                Some((d, *v, rec.get(&format!("std.d{d}")).unwrap_or(0.0)))
            })
            .collect();
        rows.sort_by_key(|r| r.0);
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|(d, a, s)| vec![d.to_string(), fmt_value(*a), fmt_value(*s)])
            .collect();
        write_table(&figures.join("delta_curve.csv"), &["delta", "accuracy", "std"], &table)?;
        fingerprint.get_or_insert(rec.fingerprint);
    }

    let mut comparison = Vec::new();
    if let Some(rec) = read(&metrics, "evaluate")? {
        for method in METHOD_ORDER {
            if let Some(acc) = rec.get(&format!("accuracy.{method}")) {
                comparison.push((method.to_string(), acc));
            }
        }
        let table: Vec<Vec<String>> = comparison
            .iter()
            .map(|(m, a)| vec![m.clone(), fmt_value(*a), rec.fingerprint.clone()])
            .collect();
        write_table(
            &figures.join("method_comparison.csv"),
            &["method", "accuracy", "fingerprint"],
            &table,
        )?;
        fingerprint = Some(rec.fingerprint);
    }

    let mut text = String::new();
    if let Some(fp) = &fingerprint {
        let _ = writeln!(text, "config {fp}");
    }
    let _ = writeln!(text, "{:<10} {:>8}", "method", "accuracy");
    for (m, a) in &comparison {
        let _ = writeln!(text, "{m:<10} {a:>8.4}");
    }
    Ok(Report {
        fingerprint,
        comparison,
        table: text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_stages_are_skipped_and_order_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let empty = report(dir.path()).unwrap();
        assert!(empty.comparison.is_empty());
        let mut rec = MetricsRecord::new("evaluate", "ff");
        for (m, a) in [("crc", 0.8), ("random", 0.1), ("baseline", 0.7)] {
            rec.scalar(format!("accuracy.{m}"), a);
        }
        rec.write(&dir.path().join("metrics")).unwrap();
        let r = report(dir.path()).unwrap();
        let order: Vec<&str> = r.comparison.iter().map(|(m, _)| m.as_str()).collect();
        assert_eq!(order, ["baseline", "random", "crc"]);
        let csv = std::fs::read_to_string(dir.path().join("figures/method_comparison.csv")).unwrap();
        assert_eq!(csv, "method,accuracy,fingerprint\nbaseline,0.7,ff\nrandom,0.1,ff\ncrc,0.8,ff\n");
        assert!(!dir.path().join("figures/delta_curve.csv").exists());
    }

    #[test]
    fn index_parsing() {
        assert_eq!(indices("score.c3.j2", "score."), Some(vec![3, 2]));
        assert_eq!(indices("selected.c3", "score."), None);
    }
}
