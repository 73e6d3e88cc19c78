//! Report types and their JSON / aligned-text / CSV renderings.
//!
//! Report files are deterministic: identical configs and seeds produce
//! byte-identical output. Wall time is therefore written to a separate
//! timing sidecar by the CLI, never into a report file.

use super::{AccessLog, Protocol, RunConfig};
use crate::analysis::OpCounts;
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Selected hyperparameter label (`-` when the method has none).
    pub selected: String,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainOutcome {
    pub domain_id: String,
    pub per_seed: Vec<SeedOutcome>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// One completed experiment. Everything needed to reproduce it (config
/// echo, seeds, code version) is embedded.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub protocol: Protocol,
    pub method: String,
    pub sampling_rate: f64,
    pub per_seed: Vec<SeedOutcome>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub per_domain: Option<Vec<DomainOutcome>>,
    pub domain_average: Option<f64>,
    pub op_counts: OpCounts,
    pub access_log: AccessLog,
    pub config_echo: RunConfig,
    pub code_version: String,
    /// Measured, not reproducible; excluded from serialized reports.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Mean/std test accuracy (and mean validation accuracy) for one cell of
/// a method-by-rate table.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CellStats {
    pub rate: f64,
    pub mean: f64,
    pub std: f64,
    pub val_mean: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub p: Option<f64>,
    pub cells: Vec<CellStats>,
}

/// Probability-sweep grid with the validation-selected p per rate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub rates: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub selected_p_per_rate: Vec<(f64, f64)>,
    pub config_echo: RunConfig,
}

/// Method-by-rate transfer grid plus the underlying per-cell reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TlGridReport {
    pub rates: Vec<f64>,
    pub rows: Vec<(String, Vec<CellStats>)>,
    pub reports: Vec<RunReport>,
}

impl TlGridReport {
    pub fn cell(&self, method_display: &str, rate: f64) -> Option<CellStats> {
        self.rows.iter().find(|(m, _)| m == method_display).and_then(|(_, cells)| {
            cells.iter().find(|c| (c.rate - rate).abs() < 1e-12).copied()
        })
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn rate_header(rate: f64) -> String {
    format!("{:.0}%", rate * 100.0)
}

/// Aligned text table: rows = methods, columns = sampling rates,
/// `mean+-std` in percent.
pub fn render_tl_grid_text(grid: &TlGridReport) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Method".to_string()];
    header.extend(grid.rates.iter().map(|&r| rate_header(r)));
    rows.push(header);
    for (method, cells) in &grid.rows {
        let mut row = vec![method.clone()];
        row.extend(cells.iter().map(|c| format!("{}+-{}", pct(c.mean), pct(c.std))));
        rows.push(row);
    }
    align(&rows)
}

pub fn render_tl_grid_csv(grid: &TlGridReport) -> String {
    let mut out = String::from("method");
    for &r in &grid.rates {
        out.push_str(&format!(",mean_{},std_{}", rate_header(r), rate_header(r)));
    }
    out.push('\n');
    for (method, cells) in &grid.rows {
        out.push_str(method);
        for c in cells {
            out.push_str(&format!(",{:.6},{:.6}", c.mean, c.std));
        }
        out.push('\n');
    }
    out
}

/// Per-domain + average layout for leave-one-domain-out runs.
pub fn render_dg_text(report: &RunReport) -> String {
    let domains = report.per_domain.as_deref().unwrap_or(&[]);
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Method".to_string()];
    header.extend(domains.iter().map(|d| d.domain_id.clone()));
    header.push("Avg.".into());
    rows.push(header);
    let mut row = vec![report.method.clone()];
    row.extend(
        domains
            .iter()
            .map(|d| format!("{}+-{}", pct(d.mean_accuracy), pct(d.std_accuracy))),
    );
    row.push(pct(report.domain_average.unwrap_or(f64::NAN)));
    rows.push(row);
    align(&rows)
}

/// Probability-sweep table in rows-of-p layout; `*` marks the
/// validation-selected probability per rate column.
pub fn render_sweep_text(sweep: &SweepReport) -> String {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["CA prob".to_string()];
    header.extend(sweep.rates.iter().map(|&r| rate_header(r)));
    rows.push(header);
    for row in &sweep.rows {
        let mut cells = vec![row.label.clone()];
        for (col, c) in row.cells.iter().enumerate() {
            let mark = match row.p {
                Some(p) if (sweep.selected_p_per_rate[col].1 - p).abs() < 1e-12 => "*",
                _ => "",
            };
            cells.push(format!("{}+-{}{}", pct(c.mean), pct(c.std), mark));
        }
        rows.push(cells);
    }
    let mut out = align(&rows);
    out.push_str("* = validation-selected p\n");
    out
}

/// Per-seed table for a single run.
pub fn render_run_text(report: &RunReport) -> String {
    let mut rows: Vec<Vec<String>> = vec![vec![
        "seed".into(),
        "selected".into(),
        "val".into(),
        "test".into(),
    ]];
    for s in &report.per_seed {
        rows.push(vec![
            s.seed.to_string(),
            s.selected.clone(),
            pct(s.val_accuracy),
            pct(s.test_accuracy),
        ]);
    }
    let mut out = format!(
        "{} @ rate {} ({:?})\n",
        report.method, report.sampling_rate, report.protocol
    );
    out.push_str(&align(&rows));
    out.push_str(&format!(
        "mean {} +- {}\n",
        pct(report.mean_accuracy),
        pct(report.std_accuracy)
    ));
    if let Some(avg) = report.domain_average {
        out.push_str(&format!("domain average {}\n", pct(avg)));
    }
    out
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{:<width$}", cell, width = widths[i]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Write a string file, creating parent directories.
pub fn write_string(path: &Path, contents: &str) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(path.to_path_buf())
}
