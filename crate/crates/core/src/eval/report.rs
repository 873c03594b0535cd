//! CSV and Markdown renderings of evaluation and benchmark results.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{BenchReport, Timing};
use crate::error::{Error, Result};

/// One kernel micro-benchmark measurement.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelBenchRow {
    pub kernel: String,
    pub config: String,
    pub threads: usize,
    pub median_ns: f64,
    pub p10_ns: f64,
    pub p90_ns: f64,
}

impl KernelBenchRow {
    pub fn new(kernel: &str, config: impl Into<String>, threads: usize, t: Timing) -> Self {
        Self {
            kernel: kernel.to_string(),
            config: config.into(),
            threads,
            median_ns: t.median_ns,
            p10_ns: t.p10_ns,
            p90_ns: t.p90_ns,
        }
    }
}

/// Quality result of one configuration over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityRow {
    pub label: String,
    pub precision_mix: String,
    pub steps: usize,
    pub k: usize,
    pub median_frechet: f64,
    /// Per-seed distances, `;`-separated in CSV.
    pub per_seed: String,
}

fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn kernel_csv(rows: &[KernelBenchRow]) -> Result<String> {
    csv_string(rows)
}

pub fn quality_csv(rows: &[QualityRow]) -> Result<String> {
    csv_string(rows)
}

pub fn latency_csv(report: &BenchReport) -> Result<String> {
    csv_string(&report.rows)
}

/// Table with one column per configuration and a single FD row.
pub fn quality_markdown(rows: &[QualityRow]) -> String {
    let mut s = String::from("| Precision |");
    for r in rows {
        let _ = write!(s, " {} |", r.label);
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(rows.len()));
    s.push_str("\n| Fréchet distance (median) |");
    for r in rows {
        let _ = write!(s, " {:.4} |", r.median_frechet);
    }
    s.push('\n');
    s
}

/// Table with one row per configuration: mix, median and spread of latency.
pub fn latency_markdown(report: &BenchReport) -> String {
    let mut s = String::from(
        "| Configuration | Precision mix | Steps | Median (ms) | p10 (ms) | p90 (ms) |\n|---|---|---|---|---|---|\n",
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} |",
            r.label,
            r.precision_mix,
            r.steps,
            r.median_ns / 1e6,
            r.p10_ns / 1e6,
            r.p90_ns / 1e6
        );
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
