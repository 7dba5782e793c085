//! Results tables: one row per (dataset, mode, lookback, horizon, model),
//! rendered as CSV or as an aligned text grid with MSE/MAE column pairs per
//! model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::MetricReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub mode: String,
    pub seq_len: usize,
    pub pred_len: usize,
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
}

impl ResultRow {
    pub fn new(
        dataset: impl Into<String>,
        model: impl Into<String>,
        mode: impl Into<String>,
        seq_len: usize,
        pred_len: usize,
        report: &MetricReport,
    ) -> Self {
        Self {
            dataset: dataset.into(),
            model: model.into(),
            mode: mode.into(),
            seq_len,
            pred_len,
            mse: report.mse,
            mae: report.mae,
            n: report.n,
        }
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            mse: self.mse,
            mae: self.mae,
            n: self.n,
        }
    }
}

type Key = (String, String, usize, usize, String);

fn key(r: &ResultRow) -> Key {
    (
        r.dataset.clone(),
        r.mode.clone(),
        r.seq_len,
        r.pred_len,
        r.model.clone(),
    )
}

/// Rows ordered by (dataset, mode, lookback, horizon, model). Inserting a
/// row with an existing key replaces it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    rows: BTreeMap<Key, ResultRow>,
}

impl ResultsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, row: ResultRow) {
        self.rows.insert(key(&row), row);
    }

    pub fn extend(&mut self, other: ResultsTable) {
        for row in other.rows.into_values() {
            self.insert(row);
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.values()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.rows() {
            w.serialize(row)
                .map_err(|e| Error::Data(format!("cannot encode results row: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Data(format!("cannot encode results: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut table = Self::new();
        for row in csv::Reader::from_reader(text.as_bytes()).deserialize() {
            table.insert(row.map_err(|e| Error::Data(format!("bad results row: {e}")))?);
        }
        Ok(table)
    }

    /// Aligned text grid: one block per (dataset, mode), one line per
    /// (lookback, horizon), an MSE/MAE column pair per model.
    pub fn render_text(&self) -> String {
        let models: Vec<&str> = self
            .rows()
            .map(|r| r.model.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut blocks: BTreeMap<(&str, &str), BTreeSet<(usize, usize)>> = BTreeMap::new();
        for r in self.rows() {
            blocks
                .entry((r.dataset.as_str(), r.mode.as_str()))
                .or_default()
                .insert((r.seq_len, r.pred_len));
        }

        let mut lines: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["dataset".into(), "mode".into(), "I".into(), "O".into()];
        for m in &models {
            header.push(format!("{m} MSE"));
            header.push(format!("{m} MAE"));
        }
        lines.push(header);
        for ((dataset, mode), cells) in &blocks {
            for &(seq_len, pred_len) in cells {
                let mut line = vec![
                    dataset.to_string(),
                    mode.to_string(),
                    seq_len.to_string(),
                    pred_len.to_string(),
                ];
                for m in &models {
                    let k = (
                        dataset.to_string(),
                        mode.to_string(),
                        seq_len,
                        pred_len,
                        m.to_string(),
                    );
                    match self.rows.get(&k) {
                        Some(r) => {
                            line.push(format!("{:.4}", r.mse));
                            line.push(format!("{:.4}", r.mae));
                        }
                        None => line.extend(["-".to_string(), "-".to_string()]),
                    }
                }
                lines.push(line);
            }
        }

        let cols = lines[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| {
                    if c < 2 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (cols - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}

/// Mode label of the per-channel average block.
pub const AVERAGE_MODE: &str = "average";
