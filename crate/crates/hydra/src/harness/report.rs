//! CSV output: one summary row per run plus a per-second timeseries.
//! Both files are append-safe; the header is written only once.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use crate::error::{HydraError, Result};
use crate::harness::metrics::RunReport;

pub const SUMMARY_HEADER: [&str; 12] = [
    "config_hash",
    "throughput_tps",
    "mean_latency_ms",
    "transmission_ms",
    "consensus_ms",
    "ordering_ms",
    "execution_ms",
    "aborts",
    "deadlocks",
    "replied_success",
    "replied_failure",
    "submitted",
];

pub const TIMESERIES_HEADER: [&str; 5] = ["config_hash", "second", "completed", "throughput_tps", "mean_latency_ms"];

fn f3(v: f64) -> String {
    format!("{v:.3}")
}

pub fn summary_row(r: &RunReport) -> Vec<String> {
    vec![
        r.config_hash.clone(),
        f3(r.throughput_tps),
        f3(r.mean_latency_ms),
        f3(r.transmission_ms),
        f3(r.consensus_ms),
        f3(r.ordering_ms),
        f3(r.execution_ms),
        r.aborts.to_string(),
        r.deadlocks.to_string(),
        r.replied_success.to_string(),
        r.replied_failure.to_string(),
        r.submitted.to_string(),
    ]
}

fn append_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let io = |source| HydraError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| HydraError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    if fresh {
        w.write_record(header).map_err(csv_err)?;
    }
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

/// Appends to `<dir>/summary.csv` and `<dir>/timeseries.csv`.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|source| HydraError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let summary = dir.join("summary.csv");
    let series = dir.join("timeseries.csv");
    append_rows(&summary, &SUMMARY_HEADER, &[summary_row(report)])?;
    let rows: Vec<Vec<String>> = report
        .timeseries
        .iter()
        .map(|s| {
            vec![
                report.config_hash.clone(),
                s.second.to_string(),
                s.completed.to_string(),
                f3(s.throughput_tps),
                f3(s.mean_latency_ms),
            ]
        })
        .collect();
    append_rows(&series, &TIMESERIES_HEADER, &rows)?;
    Ok((summary, series))
}
