//! Report documents and aligned text tables.
//!
//! Reports are versioned JSON documents. They hold no wall-clock data, so a
//! rerun with the same configuration produces byte-identical files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{BreakdownCell, Metric};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("schema mismatch: {path} has schema {found}, expected {expected}")]
    SchemaMismatch { path: String, found: u32, expected: u32 },
    #[error("no reports given")]
    Empty,
    #[error("report {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

/// Harmonic mean of the components; any zero component gives zero.
pub fn harmonic_score(components: &[f64]) -> f64 {
    if components.is_empty() || components.iter().any(|&c| c <= 0.0) {
        return 0.0;
    }
    components.len() as f64 / components.iter().map(|c| 1.0 / c).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub variant: String,
    pub master_seed: u64,
    pub graph_hash: String,
    pub n_edits: usize,
    pub n_questions: usize,
    /// Contextual edits inserted, per depth starting at 2.
    pub contextual_counts: Vec<usize>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: u32,
    pub efficacy: Metric,
    pub paraphrase: Metric,
    pub specificity: Metric,
    /// Specificity of the unedited model on the same probes.
    pub specificity_pre: Metric,
    pub multihop_accuracy: Metric,
    pub score: f64,
    pub breakdown: Vec<BreakdownCell>,
    pub metadata: RunMetadata,
}

impl MetricsReport {
    pub fn new(
        efficacy: Metric,
        paraphrase: Metric,
        specificity: Metric,
        specificity_pre: Metric,
        multihop: Metric,
        breakdown: Vec<BreakdownCell>,
        metadata: RunMetadata,
    ) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            score: harmonic_score(&[efficacy.value, paraphrase.value, specificity.value]),
            efficacy,
            paraphrase,
            specificity,
            specificity_pre,
            multihop_accuracy: multihop,
            breakdown,
            metadata,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Load a report, rejecting other schema versions.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let shown = path.display().to_string();
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| ReportError::Parse {
            path: shown.clone(),
            source,
        })?;
        let found = value.get("schema").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(ReportError::SchemaMismatch {
                path: shown,
                found,
                expected: SCHEMA_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|source| ReportError::Parse { path: shown, source })
    }
}

fn pct(m: &Metric) -> String {
    format!("{:.1} ({:.1})", 100.0 * m.value, 100.0 * m.sem)
}

/// Render rows of cells with every column padded to its widest entry.
fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                if i == 0 {
                    format!("{cell:<w$}", w = widths[i])
                } else {
                    format!("{cell:>w$}", w = widths[i])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Method rows by metric columns, percentages with standard errors in
/// parentheses.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let mut rows = vec![["Method", "Efficacy", "Paraphrase", "Specificity", "Score", "Multi-hop"]
        .map(String::from)
        .to_vec()];
    for r in reports {
        rows.push(vec![
            r.metadata.variant.clone(),
            pct(&r.efficacy),
            pct(&r.paraphrase),
            pct(&r.specificity),
            format!("{:.1}", 100.0 * r.score),
            pct(&r.multihop_accuracy),
        ]);
    }
    aligned(&rows)
}

/// Correct/total counts keyed by hop count (rows) and edited-hop count
/// (columns), with row and column totals.
pub fn breakdown_grid(report: &MetricsReport) -> String {
    let hops: BTreeSet<usize> = report.breakdown.iter().map(|c| c.hops).collect();
    let edited: BTreeSet<usize> = report.breakdown.iter().map(|c| c.n_edited).collect();
    let cell = |h: usize, e: usize| report.breakdown.iter().find(|c| c.hops == h && c.n_edited == e);
    let mut header = vec!["hops \\ edited".to_string()];
    header.extend(edited.iter().map(|e| e.to_string()));
    header.push("all".into());
    let mut rows = vec![header];
    let fmt = |c: usize, t: usize| {
        if t == 0 {
            "-".to_string()
        } else {
            format!("{c}/{t} ({:.1})", 100.0 * c as f64 / t as f64)
        }
    };
    for &h in &hops {
        let mut row = vec![h.to_string()];
        let (mut c_sum, mut t_sum) = (0, 0);
        for &e in &edited {
            let (c, t) = cell(h, e).map_or((0, 0), |x| (x.correct, x.total));
            c_sum += c;
            t_sum += t;
            row.push(fmt(c, t));
        }
        row.push(fmt(c_sum, t_sum));
        rows.push(row);
    }
    let mut total = vec!["all".to_string()];
    for &e in &edited {
        let (c, t) = report
            .breakdown
            .iter()
            .filter(|x| x.n_edited == e)
            .fold((0, 0), |(c, t), x| (c + x.correct, t + x.total));
        total.push(fmt(c, t));
    }
    let (c, t) = report.breakdown.iter().fold((0, 0), |(c, t), x| (c + x.correct, t + x.total));
    total.push(fmt(c, t));
    rows.push(total);
    aligned(&rows)
}

/// Comparison table followed by one breakdown grid per report.
pub fn show_tables(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut out = comparison_table(reports);
    for r in reports {
        let _ = write!(out, "\n{}: multi-hop accuracy by hops and edited hops\n", r.metadata.variant);
        out.push_str(&breakdown_grid(r));
    }
    Ok(out)
}

/// Load reports from disk and render them.
pub fn show_report_files(paths: &[impl AsRef<Path>]) -> Result<String> {
    let reports = paths
        .iter()
        .map(|p| MetricsReport::load(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    show_tables(&reports)
}
