//! Comparison tables: text with the best cell of each column starred, and
//! CSV for downstream tools.

use std::fmt::Write as _;
use std::path::Path;

use lasi_core::training::Metrics;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::workspace::RunManifest;

/// One model's scores, as fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub model: String,
    pub window: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Row {
    pub fn new(model: String, window: String, m: &Metrics) -> Self {
        Self {
            model,
            window,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    }

    pub fn scores(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

/// Per column, which rows hold the maximum (ties all count as best).
pub fn best_cells(rows: &[Row]) -> Vec<[bool; 4]> {
    let mut max = [f64::NEG_INFINITY; 4];
    for r in rows {
        for (m, v) in max.iter_mut().zip(r.scores()) {
            *m = m.max(v);
        }
    }
    rows.iter()
        .map(|r| {
            let s = r.scores();
            std::array::from_fn(|i| s[i] == max[i])
        })
        .collect()
}

/// Percentages with two decimals; `*` marks the best value per column.
pub fn render_text(rows: &[Row]) -> String {
    let best = best_cells(rows);
    let name_w = rows
        .iter()
        .map(|r| r.model.len())
        .chain([5])
        .max()
        .unwrap_or(5);
    let win_w = rows
        .iter()
        .map(|r| r.window.len())
        .chain([6])
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:<win_w$}  {:>8}  {:>8}  {:>8}  {:>8}",
        "Model", "Window", "Acc", "P", "R", "F1"
    );
    for (r, b) in rows.iter().zip(&best) {
        let _ = write!(out, "{:<name_w$}  {:<win_w$}", r.model, r.window);
        for (v, star) in r.scores().iter().zip(b) {
            let cell = format!("{:.2}{}", 100.0 * v, if *star { "*" } else { " " });
            let _ = write!(out, "  {cell:>8}");
        }
        out.push('\n');
    }
    out
}

pub fn to_csv(rows: &[Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Data(format!("cannot write report row: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Data(format!("cannot write report: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<Row>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Data(format!("malformed report csv: {e}")))
}

pub fn load_csv(path: &Path) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    from_csv(&text)
}

/// Accuracy under each test condition (rows) for each run (columns), or
/// `None` when no run was evaluated with perturbations.
pub fn render_perturbation_table(manifests: &[RunManifest]) -> Option<String> {
    if manifests.iter().all(|m| m.results.len() <= 1) {
        return None;
    }
    let mut conditions: Vec<&str> = Vec::new();
    for m in manifests {
        for r in &m.results {
            if !conditions.contains(&r.row.as_str()) {
                conditions.push(&r.row);
            }
        }
    }
    let col_w = manifests
        .iter()
        .map(|m| m.name.len())
        .chain([8])
        .max()
        .unwrap_or(8);
    let mut out = String::from("Accuracy under test-time perturbation\n");
    let _ = write!(out, "{:<10}", "");
    for m in manifests {
        let _ = write!(out, "  {:>col_w$}", m.name);
    }
    out.push('\n');
    for c in conditions {
        let _ = write!(out, "{c:<10}");
        for m in manifests {
            let cell = m
                .results
                .iter()
                .find(|r| r.row == c)
                .map_or("-".to_string(), |r| {
                    format!("{:.2}", 100.0 * r.metrics.accuracy)
                });
            let _ = write!(out, "  {cell:>col_w$}");
        }
        out.push('\n');
    }
    Some(out)
}
