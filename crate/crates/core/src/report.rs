//! Aggregation of finished evaluation runs into an accuracy table: one row
//! per method, one column per corruption, a mean column, and the gain over
//! source-only in parentheses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{TtaSummary, Variant};
use crate::corruptions::CorruptionKind;
use crate::error::{Error, Result};
use crate::model::BnMode;

pub const SUMMARY_SCHEMA: &str = "purge-gate/tta-summary/v1";
pub const SUMMARY_SUFFIX: &str = ".summary.json";

/// What `tta-eval` writes next to its CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub summary: TtaSummary,
    /// Accuracy of the unadapted model (frozen BatchNorm, no purging) on the
    /// same stream.
    pub source_only_accuracy: f64,
}

impl RunSummary {
    pub fn new(config_hash: &str, seed: u64, summary: TtaSummary, source_only_accuracy: f64) -> Self {
        Self {
            schema: SUMMARY_SCHEMA.into(),
            config_hash: config_hash.into(),
            seed,
            summary,
            source_only_accuracy,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("schema").and_then(|s| s.as_str()) {
            Some(SUMMARY_SCHEMA) => {}
            other => {
                return Err(Error::format(format!(
                    "{}: incompatible run schema {:?}, expected {SUMMARY_SCHEMA}",
                    path.display(),
                    other
                )))
            }
        }
        serde_json::from_value(value)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    fn column(&self) -> String {
        column_label(self.summary.corruption, self.summary.severity)
    }
}

fn column_label(kind: CorruptionKind, severity: u8) -> String {
    if kind == CorruptionKind::None {
        kind.name().to_string()
    } else {
        format!("{}-s{severity}", kind.name())
    }
}

/// Every `*.summary.json` directly inside the given directories, sorted.
pub fn find_summaries(run_dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for dir in run_dirs {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(SUMMARY_SUFFIX))
            {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Accuracy in percent.
    pub mean: f64,
    /// Sample standard deviation; absent for a single run.
    pub std: Option<f64>,
    pub runs: usize,
    /// Percentage points over source-only in the same column.
    pub improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: Variant,
    pub bn_mode: BnMode,
    pub cells: Vec<Option<Cell>>,
    /// Mean over present cells.
    pub mean: f64,
    pub mean_improvement: Option<f64>,
    /// Some column had no run, so `mean` covers fewer corruptions.
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub config_hashes: Vec<String>,
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

fn variant_order(v: Variant) -> u8 {
    match v {
        Variant::SourceOnly => 0,
        Variant::PgSp => 1,
        Variant::PgSf => 2,
    }
}

fn bn_order(m: BnMode) -> u8 {
    match m {
        BnMode::Frozen => 0,
        BnMode::PerBatchReset => 1,
        BnMode::Training => 2,
    }
}

/// Builds the table. Source-only (frozen) cells come from explicit
/// source-only runs when there are any, otherwise from the baseline each run
/// records, counted once per distinct model and column.
pub fn aggregate(runs: &[RunSummary]) -> Result<ReportTable> {
    if runs.is_empty() {
        return Err(Error::invalid_arg("no completed runs to report"));
    }
    let mut columns: BTreeSet<(CorruptionKind, u8)> = BTreeSet::new();
    let mut groups: BTreeMap<(u8, u8, Variant, BnMode), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut baseline: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in runs {
        let s = &r.summary;
        let sev = if s.corruption == CorruptionKind::None { 0 } else { s.severity };
        columns.insert((s.corruption, sev));
        let key = (variant_order(s.variant), bn_order(s.bn_mode), s.variant, s.bn_mode);
        groups
            .entry(key)
            .or_default()
            .entry(r.column())
            .or_default()
            .push(100.0 * s.accuracy);
        baseline
            .entry(r.column())
            .or_default()
            .insert(s.weights_checksum.clone(), 100.0 * r.source_only_accuracy);
    }
    let src_key = (0, 0, Variant::SourceOnly, BnMode::Frozen);
    if !groups.contains_key(&src_key) {
        let cells = baseline
            .iter()
            .map(|(c, per_model)| (c.clone(), per_model.values().copied().collect()))
            .collect();
        groups.insert(src_key, cells);
    }
    let columns: Vec<String> = columns.into_iter().map(|(k, s)| column_label(k, s)).collect();
    let source_means: BTreeMap<String, f64> = groups[&src_key]
        .iter()
        .map(|(c, v)| (c.clone(), mean_std(v).0))
        .collect();

    let rows = groups
        .into_iter()
        .map(|((_, _, method, bn_mode), cells)| {
            let cells: Vec<Option<Cell>> = columns
                .iter()
                .map(|c| {
                    cells.get(c).map(|v| {
                        let (mean, std) = mean_std(v);
                        let improvement = (method != Variant::SourceOnly || bn_mode != BnMode::Frozen)
                            .then(|| source_means.get(c).map(|s| mean - s))
                            .flatten();
                        Cell {
                            mean,
                            std,
                            runs: v.len(),
                            improvement,
                        }
                    })
                })
                .collect();
            let present: Vec<&Cell> = cells.iter().flatten().collect();
            let mean = present.iter().map(|c| c.mean).sum::<f64>() / present.len() as f64;
            let gains: Vec<f64> = present.iter().filter_map(|c| c.improvement).collect();
            let mean_improvement = (!gains.is_empty() && gains.len() == present.len())
                .then(|| gains.iter().sum::<f64>() / gains.len() as f64);
            Row {
                method,
                bn_mode,
                partial: present.len() < columns.len(),
                cells,
                mean,
                mean_improvement,
            }
        })
        .collect();
    let config_hashes: BTreeSet<String> = runs.iter().map(|r| r.config_hash.clone()).collect();
    Ok(ReportTable {
        columns,
        rows,
        config_hashes: config_hashes.into_iter().collect(),
    })
}

fn fmt_cell(c: &Cell) -> String {
    let mut s = format!("{:.2}", c.mean);
    if let Some(sd) = c.std {
        let _ = write!(s, " ± {sd:.2}");
    }
    if let Some(g) = c.improvement {
        let _ = write!(s, " ({g:+.2})");
    }
    s
}

fn bn_label(m: BnMode) -> &'static str {
    match m {
        BnMode::Frozen => "frozen",
        BnMode::PerBatchReset => "reset",
        BnMode::Training => "training",
    }
}

impl ReportTable {
    /// `method,bn,<columns...>,mean`. Absent cells are `n/a`; a partial mean
    /// carries a `*` and the footnote line explains it.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# config_hash={}", self.config_hashes.join(";"));
        let _ = writeln!(out, "method,bn,{},mean", self.columns.join(","));
        let mut any_partial = false;
        for r in &self.rows {
            let mut cells: Vec<String> = vec![r.method.to_string(), bn_label(r.bn_mode).into()];
            cells.extend(r.cells.iter().map(|c| match c {
                Some(c) => fmt_cell(c),
                None => "n/a".into(),
            }));
            let mut mean = format!("{:.2}", r.mean);
            if let Some(g) = r.mean_improvement {
                let _ = write!(mean, " ({g:+.2})");
            }
            if r.partial {
                mean.push('*');
                any_partial = true;
            }
            cells.push(mean);
            let _ = writeln!(out, "{}", cells.join(","));
        }
        if any_partial {
            let _ = writeln!(out, "# * mean over the corruptions this method was run on");
        }
        out
    }
}
